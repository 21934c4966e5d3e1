"""Experiment configuration: JSON schema, validation, stream construction.

Expected JSON shape::

    {
      "dataset": {"kind": "synthetic"|"directory", "path": ...,
                  "K": int, "C": int, "L": int, "n_per_class": int,
                  "pca_ratio": float?, "drift_profile": float?,
                  "noise_sigma": float?},
      "model":   {"D": int, "n_blocks": int, "r": int, "patch_len": int?,
                  "s": float, "s_c": float, "m": float},
      "train":   {"max_lr": float, "batch": int, "epochs_s1": int,
                  "epochs_s2": int, "epochs_s3": int, "alpha": float,
                  "beta": float, "S_n": int, "momentum": float},
      "method":  "FULL" | ... | "ALL",
      "seeds":   [int, ...]
    }

Every key is optional except dataset.kind; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SyntheticSpec, TaskStream, load_dataset, make_synthetic, split_tasks
from .errors import UsageError
from .protocol import METHODS, ModelConfig, StrategyConfig, TrainConfig, subseed

_DATASET_KEYS = {"kind", "path", "K", "C", "L", "n_per_class", "pca_ratio",
                 "drift_profile", "noise_sigma"}
_MODEL_KEYS = {"D", "n_blocks", "r", "patch_len", "s", "s_c", "m"}
_TRAIN_KEYS = {"max_lr", "batch", "epochs_s1", "epochs_s2", "epochs_s3",
               "alpha", "beta", "S_n", "momentum"}
_TOP_KEYS = {"dataset", "model", "train", "method", "seeds"}


def _check_keys(section: dict[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise UsageError(
            f"unknown {where} keys {sorted(unknown)}; valid keys: {sorted(allowed)}"
        )


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    n_classes: int = 8
    channels: int = 3
    length: int = 64
    n_per_class: int = 40
    pca_ratio: float | None = None
    drift_profile: float = 0.0
    noise_sigma: float = 0.1


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "FULL"
    seeds: list[int] = field(default_factory=lambda: [0])

    def methods(self) -> list[str]:
        return list(METHODS) if self.method == "ALL" else [self.method]

    def strategy(self, method: str | None = None) -> StrategyConfig:
        return StrategyConfig(method=method or self.method, model=self.model,
                              train=self.train, pca_ratio=self.dataset.pca_ratio)

    def build_stream(self, seed: int) -> TaskStream:
        """Materialize the task stream for one seed."""
        ds = self.dataset
        if ds.kind == "synthetic":
            spec = SyntheticSpec(n_classes=ds.n_classes, channels=ds.channels,
                                 length=ds.length, n_per_class=ds.n_per_class,
                                 drift_profile=ds.drift_profile,
                                 noise_sigma=ds.noise_sigma)
            samples = make_synthetic(spec, subseed(seed, "data"))
            return split_tasks(samples, ds.n_classes, subseed(seed, "split"))
        if ds.kind == "directory":
            if ds.path is None:
                raise UsageError("dataset.kind 'directory' requires dataset.path")
            samples, meta = load_dataset(ds.path)
            return split_tasks(samples, meta.classes, subseed(seed, "split"))
        raise UsageError(f"unknown dataset kind {ds.kind!r}; valid: synthetic, directory")

    def echo(self) -> dict[str, Any]:
        """Config as plain JSON-serializable data, for report embedding."""
        return {
            "dataset": {
                "kind": self.dataset.kind, "path": self.dataset.path,
                "K": self.dataset.n_classes, "C": self.dataset.channels,
                "L": self.dataset.length, "n_per_class": self.dataset.n_per_class,
                "pca_ratio": self.dataset.pca_ratio,
                "drift_profile": self.dataset.drift_profile,
                "noise_sigma": self.dataset.noise_sigma,
            },
            "model": {
                "D": self.model.embed_dim, "n_blocks": self.model.n_blocks,
                "r": self.model.bottleneck, "patch_len": self.model.patch_len,
                "s": self.model.adapter_scale, "s_c": self.model.logit_scale,
                "m": self.model.margin,
            },
            "train": {
                "max_lr": self.train.max_lr, "batch": self.train.batch_size,
                "epochs_s1": self.train.epochs_s1, "epochs_s2": self.train.epochs_s2,
                "epochs_s3": self.train.epochs_s3, "alpha": self.train.alpha,
                "beta": self.train.beta, "S_n": self.train.samples_per_class,
                "momentum": self.train.momentum,
            },
            "method": self.method,
            "seeds": list(self.seeds),
        }


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    _check_keys(raw, _TOP_KEYS, "config")
    ds_raw = dict(raw.get("dataset", {}))
    _check_keys(ds_raw, _DATASET_KEYS, "dataset")
    model_raw = dict(raw.get("model", {}))
    _check_keys(model_raw, _MODEL_KEYS, "model")
    train_raw = dict(raw.get("train", {}))
    _check_keys(train_raw, _TRAIN_KEYS, "train")

    try:
        dataset = DatasetConfig(
            kind=str(ds_raw.get("kind", "synthetic")),
            path=ds_raw.get("path"),
            n_classes=int(ds_raw.get("K", 8)),
            channels=int(ds_raw.get("C", 3)),
            length=int(ds_raw.get("L", 64)),
            n_per_class=int(ds_raw.get("n_per_class", 40)),
            pca_ratio=None if ds_raw.get("pca_ratio") is None else float(ds_raw["pca_ratio"]),
            drift_profile=float(ds_raw.get("drift_profile", 0.0)),
            noise_sigma=float(ds_raw.get("noise_sigma", 0.1)),
        )
        embed_dim = int(model_raw.get("D", 32))
        model = ModelConfig(
            embed_dim=embed_dim,
            n_blocks=int(model_raw.get("n_blocks", 2)),
            bottleneck=int(model_raw.get("r", max(1, embed_dim // 4))),
            patch_len=None if model_raw.get("patch_len") is None else int(model_raw["patch_len"]),
            adapter_scale=float(model_raw.get("s", 1.0)),
            logit_scale=float(model_raw.get("s_c", 10.0)),
            margin=float(model_raw.get("m", 0.1)),
        )
        train = TrainConfig(
            max_lr=float(train_raw.get("max_lr", 0.005)),
            batch_size=int(train_raw.get("batch", 16)),
            epochs_s1=int(train_raw.get("epochs_s1", 30)),
            epochs_s2=int(train_raw.get("epochs_s2", 20)),
            epochs_s3=int(train_raw.get("epochs_s3", 20)),
            alpha=float(train_raw.get("alpha", 0.1)),
            beta=float(train_raw.get("beta", 1.0)),
            samples_per_class=int(train_raw.get("S_n", 256)),
            momentum=float(train_raw.get("momentum", 0.9)),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"malformed config value: {exc}") from exc

    method = str(raw.get("method", "FULL"))
    if method != "ALL" and method not in METHODS:
        raise UsageError(
            f"unknown method {method!r}; valid values: {', '.join(list(METHODS) + ['ALL'])}"
        )
    seeds_raw = raw.get("seeds", [0])
    if not isinstance(seeds_raw, list) or not seeds_raw:
        raise UsageError("'seeds' must be a non-empty list of integers")
    try:
        seeds = [int(s) for s in seeds_raw]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"'seeds' must be integers: {exc}") from exc

    return ExperimentConfig(dataset=dataset, model=model, train=train,
                            method=method, seeds=seeds)


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config root must be a JSON object")
    return parse_config(raw)
