"""Dataset ingestion, synthetic stream generation, task splitting and PCA.

Dataset directory format: ``meta.json`` with ``{"channels": C, "length": L,
"classes": K}`` plus ``train.csv`` / ``test.csv`` where each row is
``label, v_1, ..., v_{C*L}`` with values channel-major (channel 0's L values
first).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError

TRAIN_FRACTION = 0.7
VAL_FRACTION = 0.1


@dataclass
class TimeSeriesSample:
    """One labelled multivariate series with values of shape (channels, length)."""

    values: np.ndarray
    label: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ContractError(f"sample values must be 2-D (C, L), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("sample values must be finite")
        if self.label < 0:
            raise ContractError(f"label must be non-negative, got {self.label}")


@dataclass
class Task:
    """One incremental task: a disjoint class set with its own data splits."""

    id: int
    classes: tuple[int, ...]
    train: list[TimeSeriesSample]
    val: list[TimeSeriesSample] = field(default_factory=list)
    test: list[TimeSeriesSample] = field(default_factory=list)

    def __post_init__(self):
        self.classes = tuple(sorted(self.classes))
        allowed = set(self.classes)
        for split in (self.train, self.val, self.test):
            for s in split:
                if s.label not in allowed:
                    raise ContractError(
                        f"task {self.id}: sample label {s.label} outside classes {self.classes}"
                    )


@dataclass
class TaskStream:
    """Ordered tasks with pairwise-disjoint class sets."""

    tasks: list[Task]
    class_order: list[int]
    seed: int

    def validate(self) -> None:
        seen: set[int] = set()
        for task in self.tasks:
            overlap = seen.intersection(task.classes)
            if overlap:
                raise ContractError(f"task {task.id} reuses classes {sorted(overlap)}")
            seen.update(task.classes)
        if seen != set(self.class_order):
            raise ContractError("union of task classes does not match the class order")

    @property
    def n_classes(self) -> int:
        return len(self.class_order)


@dataclass
class DatasetMeta:
    channels: int
    length: int
    classes: int


def _read_csv_samples(path: Path, meta: DatasetMeta) -> list[TimeSeriesSample]:
    expected = 1 + meta.channels * meta.length
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if len(row) != expected:
                raise DataFormatError(
                    f"{path.name} row {i}: expected {expected} fields, got {len(row)}"
                )
            try:
                label = int(row[0])
                values = np.array([float(v) for v in row[1:]], dtype=np.float32)
            except ValueError as exc:
                raise DataFormatError(f"{path.name} row {i}: {exc}") from exc
            if not 0 <= label < meta.classes:
                raise DataFormatError(
                    f"{path.name} row {i}: label {label} outside 0..{meta.classes - 1}"
                )
            samples.append(TimeSeriesSample(values.reshape(meta.channels, meta.length), label))
    return samples


def load_dataset(path: str | Path) -> tuple[list[TimeSeriesSample], DatasetMeta]:
    """Read a dataset directory; returns all samples (train + test) and meta."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing {meta_path}")
    raw = json.loads(meta_path.read_text(encoding="utf-8"))
    for key in ("channels", "length", "classes"):
        if key not in raw or int(raw[key]) < 1:
            raise DataFormatError(f"meta.json: missing or invalid '{key}'")
    meta = DatasetMeta(int(raw["channels"]), int(raw["length"]), int(raw["classes"]))

    samples: list[TimeSeriesSample] = []
    for name in ("train.csv", "test.csv"):
        fpath = root / name
        if not fpath.exists():
            raise FileNotFoundError(f"missing {fpath}")
        samples.extend(_read_csv_samples(fpath, meta))

    present = {s.label for s in samples}
    missing = set(range(meta.classes)) - present
    if missing:
        raise DataFormatError(f"declared {meta.classes} classes but classes {sorted(missing)} are absent")
    return samples, meta


def save_dataset(
    path: str | Path,
    train: list[TimeSeriesSample],
    test: list[TimeSeriesSample],
    meta: DatasetMeta,
) -> None:
    """Write a dataset directory in the format read by :func:`load_dataset`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(
        json.dumps({"channels": meta.channels, "length": meta.length, "classes": meta.classes}),
        encoding="utf-8",
    )
    for name, split in (("train.csv", train), ("test.csv", test)):
        with open(root / name, "w", newline="\n", encoding="utf-8") as fh:
            for s in split:
                flat = s.values.reshape(-1)
                fh.write(",".join([str(s.label)] + [repr(float(v)) for v in flat]) + "\n")


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic class-template generator."""

    n_classes: int
    channels: int
    length: int
    n_per_class: int
    drift_profile: float = 0.0
    noise_sigma: float = 0.1


def make_synthetic(spec: SyntheticSpec, seed: int) -> list[TimeSeriesSample]:
    """Generate class-keyed sinusoid templates plus i.i.d. Gaussian noise.

    Each class k gets its own frequencies/phases; drift_profile > 0 scales and
    offsets later classes so successive tasks sit further from earlier ones.
    """
    if spec.n_classes % 2 != 0:
        raise ContractError(
            f"n_classes must be even for the two-classes-per-task protocol, got {spec.n_classes}"
        )
    if spec.n_per_class < 8:
        raise ContractError(f"n_per_class must be >= 8, got {spec.n_per_class}")
    rng = np.random.default_rng(seed)
    t = np.arange(spec.length, dtype=np.float64) / spec.length
    n_harmonics = 3
    samples: list[TimeSeriesSample] = []
    for k in range(spec.n_classes):
        freqs = rng.uniform(1.0, 6.0, size=n_harmonics)
        amps = rng.uniform(0.5, 1.2, size=(spec.channels, n_harmonics))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(spec.channels, n_harmonics))
        template = np.zeros((spec.channels, spec.length), dtype=np.float64)
        for h in range(n_harmonics):
            template += amps[:, h : h + 1] * np.sin(
                2.0 * np.pi * freqs[h] * t[None, :] + phases[:, h : h + 1]
            )
        scale = 1.0 + spec.drift_profile * k
        offset = 0.5 * spec.drift_profile * k
        template = scale * template + offset
        for _ in range(spec.n_per_class):
            noise = rng.normal(0.0, spec.noise_sigma, size=template.shape) if spec.noise_sigma > 0 else 0.0
            samples.append(TimeSeriesSample((template + noise).astype(np.float32), k))
    return samples


def split_tasks(samples: list[TimeSeriesSample], n_classes: int, seed: int) -> TaskStream:
    """Shuffle the class order and assign consecutive pairs to tasks.

    Per task, samples are split 70/10/20 into train/val/test, stratified by
    class.
    """
    if n_classes % 2 != 0:
        raise ContractError(f"n_classes must be divisible by 2, got {n_classes}")
    by_class: dict[int, list[TimeSeriesSample]] = {k: [] for k in range(n_classes)}
    for s in samples:
        if s.label not in by_class:
            raise ContractError(f"sample label {s.label} outside 0..{n_classes - 1}")
        by_class[s.label].append(s)
    for k, group in by_class.items():
        if len(group) < 5:
            raise ContractError(f"class {k} has {len(group)} samples, need >= 5 to split")

    rng = np.random.default_rng(seed)
    class_order = [int(c) for c in rng.permutation(n_classes)]
    tasks = []
    for i in range(n_classes // 2):
        pair = class_order[2 * i : 2 * i + 2]
        train: list[TimeSeriesSample] = []
        val: list[TimeSeriesSample] = []
        test: list[TimeSeriesSample] = []
        for cls in pair:
            group = by_class[cls]
            order = rng.permutation(len(group))
            n = len(group)
            n_train = int(TRAIN_FRACTION * n)
            n_val = max(1, int(VAL_FRACTION * n))
            train.extend(group[j] for j in order[:n_train])
            val.extend(group[j] for j in order[n_train : n_train + n_val])
            test.extend(group[j] for j in order[n_train + n_val :])
        tasks.append(Task(id=i + 1, classes=tuple(pair), train=train, val=val, test=test))
    stream = TaskStream(tasks=tasks, class_order=class_order, seed=seed)
    stream.validate()
    return stream


@dataclass
class ChannelProjection:
    """Mean-centered projection onto leading channel principal components."""

    mean: np.ndarray        # (C,)
    components: np.ndarray  # (C, m), columns are components
    eigenvalues: np.ndarray  # (C,), descending

    def apply(self, values: np.ndarray) -> np.ndarray:
        centered = np.asarray(values, dtype=np.float64) - self.mean[:, None]
        return (self.components.T @ centered).astype(np.float32)

    def apply_sample(self, sample: TimeSeriesSample) -> TimeSeriesSample:
        return TimeSeriesSample(self.apply(sample.values), sample.label)


def fit_channel_projection(train_values: list[np.ndarray], ratio: float) -> ChannelProjection:
    """Eigen-decompose the channel covariance over (samples x time) observations."""
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"ratio must be in (0, 1], got {ratio}")
    if not train_values:
        raise ContractError("cannot fit a projection on empty training data")
    obs = np.concatenate([np.asarray(v, dtype=np.float64) for v in train_values], axis=1)  # (C, N*L)
    n_channels = obs.shape[0]
    mean = obs.mean(axis=1)
    centered = obs - mean[:, None]
    cov = centered @ centered.T / max(1, obs.shape[1] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    # deterministic sign: largest-magnitude entry of each component positive
    for j in range(eigvecs.shape[1]):
        col = eigvecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            eigvecs[:, j] = -col
    m = math.ceil(ratio * n_channels)
    return ChannelProjection(mean=mean, components=eigvecs[:, :m], eigenvalues=eigvals)


def pca_reduce(
    task_train: list[TimeSeriesSample],
    task_eval: list[TimeSeriesSample],
    ratio: float,
) -> tuple[list[TimeSeriesSample], list[TimeSeriesSample], ChannelProjection]:
    """Fit channel PCA on one task's training samples and project both splits.

    The returned projection is meant to be reused on that task's test set;
    fitting never sees samples from any other task.
    """
    projection = fit_channel_projection([s.values for s in task_train], ratio)
    train_red = [projection.apply_sample(s) for s in task_train]
    eval_red = [projection.apply_sample(s) for s in task_eval]
    return train_red, eval_red, projection
