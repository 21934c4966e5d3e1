"""Class prototypes: Gaussian feature models kept in place of raw exemplars.

A prototype is the feature mean and covariance of one class under the model
that saw its task. Stored prototypes can be carried into a newer feature
space either through the trained drift compensator (mean and covariance
pushed through the linear map) or through the semantic-drift baseline
(kernel-weighted mean shift, covariance untouched).
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import TimeSeriesSample
from .drift import DriftCompensator
from .errors import ContractError, DataFormatError
from .model import FeatureExtractor, ModelState, features_np

logger = logging.getLogger(__name__)

_SHRINKAGE = 1e-4
_SYMMETRY_TOL = 1e-6
_KERNEL_FLOOR = 1e-12


@dataclass
class ClassPrototype:
    class_id: int
    mean: np.ndarray  # (D,)
    cov: np.ndarray   # (D, D)
    task_of_origin: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.cov = np.asarray(self.cov, dtype=np.float32)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ContractError(
                f"covariance shape {self.cov.shape} does not match mean dim {self.mean.size}"
            )


class PrototypeStore:
    """One prototype per seen class, keyed by class id."""

    def __init__(self):
        self._by_class: dict[int, ClassPrototype] = {}

    def __len__(self) -> int:
        return len(self._by_class)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._by_class

    def get(self, class_id: int) -> ClassPrototype:
        return self._by_class[class_id]

    def add(self, prototypes: Sequence[ClassPrototype]) -> None:
        for p in prototypes:
            if p.class_id in self._by_class:
                raise ContractError(f"class {p.class_id} already has a prototype")
            self._by_class[p.class_id] = p

    def classes(self) -> list[int]:
        return sorted(self._by_class)

    def prototypes(self) -> list[ClassPrototype]:
        return [self._by_class[c] for c in self.classes()]

    def means(self) -> dict[int, np.ndarray]:
        return {c: self._by_class[c].mean.copy() for c in self.classes()}

    def copy(self) -> "PrototypeStore":
        dup = PrototypeStore()
        for p in self.prototypes():
            dup.add([ClassPrototype(p.class_id, p.mean.copy(), p.cov.copy(), p.task_of_origin)])
        return dup


def compute_prototypes(extractor: ModelState | FeatureExtractor,
                       samples: Sequence[TimeSeriesSample],
                       task_id: int) -> list[ClassPrototype]:
    """Per-class feature mean and shrunk sample covariance (divisor N-1)."""
    by_class: dict[int, list[TimeSeriesSample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    out = []
    for class_id in sorted(by_class):
        group = by_class[class_id]
        if len(group) < 2:
            raise ContractError(
                f"class {class_id} has {len(group)} sample(s); covariance needs >= 2"
            )
        feats = features_np(extractor, group).astype(np.float64)
        mean = feats.mean(axis=0)
        centered = feats - mean
        cov = centered.T @ centered / (len(group) - 1)
        dim = cov.shape[0]
        eps = _SHRINKAGE * np.trace(cov) / dim
        cov = cov + eps * np.eye(dim)
        out.append(ClassPrototype(class_id, mean, cov, task_id))
    return out


def update_with_compensator(store: PrototypeStore, compensator: DriftCompensator) -> PrototypeStore:
    """Push every stored Gaussian through the linear map: mean Wm, cov W S W^T."""
    w = compensator.weight.data.astype(np.float64)
    for p in store.prototypes():
        if p.mean.size != compensator.dim:
            raise ContractError(
                f"compensator dim {compensator.dim} does not match prototype dim {p.mean.size}"
            )
        p.mean = (w @ p.mean.astype(np.float64)).astype(np.float32)
        p.cov = (w @ p.cov.astype(np.float64) @ w.T).astype(np.float32)
    return store


def median_pairwise_distance(feats: np.ndarray) -> float:
    """Median heuristic for the SDC kernel width; 1.0 on degenerate input."""
    n = feats.shape[0]
    if n < 2:
        return 1.0
    diffs = feats[:, None, :] - feats[None, :, :]
    dists = np.sqrt((diffs ** 2).sum(axis=2))
    upper = dists[np.triu_indices(n, k=1)]
    med = float(np.median(upper))
    return med if med > 0 else 1.0


def update_with_sdc(store: PrototypeStore,
                    old_model: ModelState | FeatureExtractor,
                    new_model: ModelState | FeatureExtractor,
                    new_task_data: Sequence[TimeSeriesSample],
                    sigma_kernel: float | None = None,
                    on_fallback: Callable[[int], None] | None = None) -> PrototypeStore:
    """Shift each stored mean by the kernel-weighted mean feature drift.

    Drift is measured per new-task sample as new minus old features; weights
    come from a Gaussian kernel around the prototype in old-feature space.
    Covariances are left unchanged. If every weight underflows, the shift
    falls back to the unweighted mean drift and the event is reported.
    """
    if not new_task_data:
        raise ContractError("SDC update requires non-empty new-task data")
    old_feats = features_np(old_model, new_task_data).astype(np.float64)
    new_feats = features_np(new_model, new_task_data).astype(np.float64)
    if old_feats.shape != new_feats.shape:
        raise ContractError(f"feature shapes differ: {old_feats.shape} vs {new_feats.shape}")
    drift = new_feats - old_feats
    sigma = sigma_kernel if sigma_kernel is not None else median_pairwise_distance(old_feats)
    if sigma <= 0:
        raise ContractError(f"sigma_kernel must be positive, got {sigma}")
    for p in store.prototypes():
        sq = ((old_feats - p.mean.astype(np.float64)) ** 2).sum(axis=1)
        weights = np.exp(-sq / (2.0 * sigma * sigma))
        total = weights.sum()
        if not np.any(weights > _KERNEL_FLOOR):
            logger.warning("SDC kernel underflow for class %d; using unweighted mean drift",
                           p.class_id)
            if on_fallback is not None:
                on_fallback(p.class_id)
            shift = drift.mean(axis=0)
        else:
            shift = (weights[:, None] * drift).sum(axis=0) / total
        p.mean = (p.mean.astype(np.float64) + shift).astype(np.float32)
    return store


def covariance_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues are clamped to zero."""
    cov = np.asarray(cov, dtype=np.float64)
    asym = np.abs(cov - cov.T).max() if cov.size else 0.0
    if asym > _SYMMETRY_TOL:
        raise ContractError(f"covariance asymmetry {asym:.3g} exceeds {_SYMMETRY_TOL}")
    sym = (cov + cov.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def sample_features(prototype: ClassPrototype, n_samples: int, seed: int) -> np.ndarray:
    """Draw n feature vectors mean + cov^(1/2) z with z standard normal."""
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    root = covariance_sqrt(prototype.cov)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, prototype.mean.size))
    return (prototype.mean.astype(np.float64) + z @ root).astype(np.float32)


def prototype_distance(updated: PrototypeStore | Mapping[int, np.ndarray],
                       real: PrototypeStore | Mapping[int, np.ndarray]) -> float:
    """Sum over classes of the squared distance between updated and real means."""
    upd = updated.means() if isinstance(updated, PrototypeStore) else dict(updated)
    ref = real.means() if isinstance(real, PrototypeStore) else dict(real)
    if set(upd) != set(ref):
        raise ContractError(
            f"class sets differ: {sorted(upd)} vs {sorted(ref)}"
        )
    total = 0.0
    for c, mu in upd.items():
        diff = np.asarray(mu, dtype=np.float64) - np.asarray(ref[c], dtype=np.float64)
        total += float((diff ** 2).sum())
    return total


_COV_MAGIC = b"PDSB"
_COV_VERSION = 1


def save_prototypes(store: PrototypeStore, csv_path: str | Path, cov_path: str | Path) -> None:
    """Write means to CSV and covariance blocks to the companion binary file."""
    protos = store.prototypes()
    if not protos:
        raise ContractError("cannot dump an empty prototype store")
    dim = protos[0].mean.size
    with open(csv_path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id", "task_of_origin"] + [f"mu_{i}" for i in range(dim)])
        for p in protos:
            writer.writerow([p.class_id, p.task_of_origin] + [repr(float(v)) for v in p.mean])
    with open(cov_path, "wb") as fh:
        fh.write(_COV_MAGIC)
        fh.write(struct.pack("<III", _COV_VERSION, dim, len(protos)))
        for p in protos:
            fh.write(struct.pack("<II", p.class_id, p.task_of_origin))
            fh.write(p.cov.astype("<f4").tobytes())


def load_prototypes(csv_path: str | Path, cov_path: str | Path) -> PrototypeStore:
    with open(cov_path, "rb") as fh:
        if fh.read(4) != _COV_MAGIC:
            raise DataFormatError(f"{cov_path}: bad magic")
        version, dim, count = struct.unpack("<III", fh.read(12))
        if version != _COV_VERSION:
            raise DataFormatError(f"{cov_path}: unsupported version {version}")
        covs: dict[int, tuple[int, np.ndarray]] = {}
        for _ in range(count):
            class_id, task = struct.unpack("<II", fh.read(8))
            block = np.frombuffer(fh.read(4 * dim * dim), dtype="<f4").reshape(dim, dim)
            covs[class_id] = (task, block.copy())
    store = PrototypeStore()
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["class_id", "task_of_origin"]:
            raise DataFormatError(f"{csv_path}: unexpected header {header}")
        for row in reader:
            class_id = int(row[0])
            task = int(row[1])
            mean = np.array([float(v) for v in row[2:]], dtype=np.float32)
            if class_id not in covs:
                raise DataFormatError(f"{csv_path}: class {class_id} missing covariance block")
            cov_task, cov = covs[class_id]
            if cov_task != task:
                raise DataFormatError(f"class {class_id}: task mismatch between files")
            store.add([ClassPrototype(class_id, mean, cov, task)])
    return store
