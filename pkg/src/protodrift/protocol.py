"""Per-task three-stage training protocol over a task stream.

Stage 1 tunes the shared adapters and a fresh per-task cosine head (plus,
from the second task on, the drift compensator) under the combined loss
cos + alpha * distillation + beta * drift. Stage 2 refines the compensator
with both feature extractors frozen. Stage 3 carries old prototypes into the
new feature space, merges in the new task's prototypes, and retrains the
whole classifier bank on features sampled from the stored Gaussians.

Baseline strategies switch individual pieces off; see ``METHODS``.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from typing import IO, Any, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import ChannelProjection, Task, TaskStream, TimeSeriesSample, pca_reduce
from .drift import DriftCompensator, drift_loss_from_features, refine_compensator
from .errors import ContractError
from .metrics import AccuracyMatrix, RunReport
from .model import (
    CosineHead,
    HeadBank,
    ModelState,
    build_model,
    cosine_margin_loss,
    extract_features_batch,
    features_np,
    mean_squared_distance,
    predict_batch,
    unified_ce_loss,
)
from .optim import SGD, SgdConfig, one_cycle_lr
from .prototypes import (
    PrototypeStore,
    compute_prototypes,
    prototype_distance,
    sample_features,
    update_with_compensator,
    update_with_sdc,
)

METHODS = (
    "FULL",
    "FINETUNE",
    "BASE",
    "BASE_UCT",
    "SDC",
    "DCN_S1_ONLY",
    "DCN_S2_ONLY",
    "DCN_S1LOSS_S2",
    "DEFAULT_NO_UPDATE",
)


@dataclass(frozen=True)
class MethodTraits:
    uses_kd: bool
    dc_loss_in_s1: bool
    runs_refinement: bool
    reinit_before_refinement: bool
    prototype_rule: str          # "dcn" | "sdc" | "none"
    retrains_classifier: bool
    keeps_store: bool


_TRAITS: dict[str, MethodTraits] = {
    "FULL": MethodTraits(True, True, True, False, "dcn", True, True),
    "FINETUNE": MethodTraits(False, False, False, False, "none", False, False),
    "BASE": MethodTraits(True, False, False, False, "none", False, False),
    "BASE_UCT": MethodTraits(True, False, False, False, "none", True, True),
    "SDC": MethodTraits(True, False, False, False, "sdc", True, True),
    "DCN_S1_ONLY": MethodTraits(True, True, False, False, "dcn", True, True),
    "DCN_S2_ONLY": MethodTraits(True, False, True, False, "dcn", True, True),
    "DCN_S1LOSS_S2": MethodTraits(True, True, True, True, "dcn", True, True),
    "DEFAULT_NO_UPDATE": MethodTraits(True, False, False, False, "none", True, True),
}


def method_traits(method: str) -> MethodTraits:
    if method not in _TRAITS:
        raise ContractError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    return _TRAITS[method]


@dataclass
class ModelConfig:
    embed_dim: int = 32
    n_blocks: int = 2
    bottleneck: int = 8
    patch_len: int | None = None
    adapter_scale: float = 1.0
    logit_scale: float = 10.0
    margin: float = 0.1


@dataclass
class TrainConfig:
    max_lr: float = 0.005
    batch_size: int = 16
    epochs_s1: int = 30
    epochs_s2: int = 20
    epochs_s3: int = 20
    alpha: float = 0.1
    beta: float = 1.0
    samples_per_class: int = 256
    momentum: float = 0.9
    reinit_heads: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError(
                f"loss weights must be non-negative, got alpha={self.alpha} beta={self.beta}"
            )


@dataclass
class StrategyConfig:
    method: str = "FULL"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pca_ratio: float | None = None

    def __post_init__(self):
        method_traits(self.method)

    def traits(self) -> MethodTraits:
        return method_traits(self.method)


class RunLogger:
    """Line-oriented JSON event log; events also stay in memory for callers."""

    def __init__(self, stream: IO[str] | None = None):
        self.events: list[dict[str, Any]] = []
        self._stream = stream

    def emit(self, event: str, **payload: Any) -> None:
        record = {"event": event, **payload}
        self.events.append(record)
        if self._stream is not None:
            self._stream.write(json.dumps(record, sort_keys=True) + "\n")


def subseed(master: int, *parts: Any) -> int:
    """Stable derived seed so independent RNG streams never collide."""
    text = "|".join([str(master), *map(str, parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _digest(tensors: Sequence[Tensor]) -> bytes:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.data.tobytes())
    return h.digest()


def _model_sections(model: ModelState) -> dict[str, bytes]:
    return {
        "backbone": _digest(model.backbone.weight_tensors()),
        "adapters": _digest(model.adapter_params()),
        "heads": _digest(model.bank.head_params()),
    }


def _require_unchanged(before: dict[str, bytes], after: dict[str, bytes],
                       sections: Sequence[str], where: str) -> None:
    for name in sections:
        if before[name] != after[name]:
            raise ContractError(f"freeze violation: {name} changed during {where}")


@dataclass
class RunState:
    """Mutable state threaded through a stream run."""

    model: ModelState
    store: PrototypeStore
    matrix: AccuracyMatrix
    seed: int
    cfg: StrategyConfig
    old_model: ModelState | None = None
    dcn: DriftCompensator | None = None
    drift: dict[int, float] = field(default_factory=dict)
    dcn_train_count: int = 0
    stage_seconds: dict[str, float] = field(default_factory=dict)
    backbone_digest: bytes = b""
    # metric-only retention: task id -> training samples (post-projection),
    # read exclusively by the drift-distance instrumentation
    metric_archive: dict[int, list[TimeSeriesSample]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.backbone_digest:
            self.backbone_digest = _digest(self.model.backbone.weight_tensors())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if idx.size:
            yield idx


def _train_stage1(state: RunState, task: Task, logger: RunLogger) -> None:
    cfg = state.cfg
    traits = cfg.traits()
    model = state.model
    train = task.train
    labels = [s.label for s in train]
    t = task.id

    head = CosineHead(t, task.classes, model.embed_dim,
                      seed=subseed(state.seed, "head", t))
    model.bank.append(head)

    needs_old = t >= 2 and (traits.uses_kd or traits.dc_loss_in_s1)
    old_feats = features_np(state.old_model, train) if needs_old else None

    if traits.prototype_rule == "dcn" and t >= 2:
        state.dcn = DriftCompensator(model.embed_dim)

    params = model.adapter_params() + [head.weights]
    train_dcn_now = traits.dc_loss_in_s1 and t >= 2 and cfg.train.beta > 0
    if train_dcn_now:
        params.append(state.dcn.weight)

    n = len(train)
    n_batches = (n + cfg.train.batch_size - 1) // cfg.train.batch_size
    total_steps = max(1, cfg.train.epochs_s1 * n_batches)
    optimizer = SGD(params, momentum=cfg.train.momentum)
    rng = np.random.default_rng(subseed(state.seed, "s1", t))
    alpha = cfg.train.alpha
    beta = cfg.train.beta
    step = 0
    for epoch in range(cfg.train.epochs_s1):
        epoch_loss = 0.0
        n_steps = 0
        for idx in _batches(n, cfg.train.batch_size, rng):
            batch = [train[i] for i in idx]
            batch_labels = [labels[i] for i in idx]
            feats = extract_features_batch(model, batch)
            loss = cosine_margin_loss(feats, batch_labels, model.bank, t)
            if t >= 2 and traits.uses_kd and alpha > 0:
                kd = mean_squared_distance(Tensor(old_feats[idx]), feats)
                loss = loss + kd * alpha
            if train_dcn_now:
                dc = drift_loss_from_features(state.dcn, Tensor(old_feats[idx]), feats)
                loss = loss + dc * beta
            grads = ag.grad(loss, params)
            optimizer.step(grads, one_cycle_lr(step, total_steps, cfg.train.max_lr))
            step += 1
            epoch_loss += loss.item()
            n_steps += 1
        logger.emit("stage_epoch", task=t, stage=1, epoch=epoch,
                    loss=epoch_loss / max(1, n_steps))


def retrain_unified(bank: HeadBank, store: PrototypeStore, n_per_class: int,
                    cfg: TrainConfig, seed: int, reinit: bool = False,
                    logger: RunLogger | None = None, task_id: int | None = None) -> HeadBank:
    """Retrain every head on features sampled from the stored Gaussians."""
    if len(store) == 0:
        raise ContractError("cannot retrain the classifier from an empty prototype store")
    if n_per_class < 1:
        raise ContractError(f"samples per class must be >= 1, got {n_per_class}")
    seen = bank.seen_classes()
    missing = [c for c in seen if c not in store]
    if missing:
        raise ContractError(f"prototype store is missing classes {missing}")

    feats_list = []
    label_list: list[int] = []
    for c in store.classes():
        v = sample_features(store.get(c), n_per_class, subseed(seed, "sample", c))
        feats_list.append(v)
        label_list.extend([c] * n_per_class)
    all_feats = np.concatenate(feats_list, axis=0)
    all_labels = np.asarray(label_list)

    if reinit:
        for head in bank.heads:
            rng = np.random.default_rng(subseed(seed, "reinit", head.task_id))
            head.weights.data[...] = (rng.standard_normal(head.weights.shape) * 0.02).astype(np.float32)

    params = bank.head_params()
    optimizer = SGD(params, momentum=cfg.momentum)
    n = all_feats.shape[0]
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = max(1, cfg.epochs_s3 * n_batches)
    rng = np.random.default_rng(subseed(seed, "s3-order"))
    step = 0
    for epoch in range(cfg.epochs_s3):
        epoch_loss = 0.0
        n_steps = 0
        for idx in _batches(n, cfg.batch_size, rng):
            loss = unified_ce_loss(Tensor(all_feats[idx]),
                                   [int(v) for v in all_labels[idx]], bank)
            grads = ag.grad(loss, params)
            optimizer.step(grads, one_cycle_lr(step, total_steps, cfg.max_lr))
            step += 1
            epoch_loss += loss.item()
            n_steps += 1
        if logger is not None:
            logger.emit("stage_epoch", task=task_id, stage=3, epoch=epoch,
                        loss=epoch_loss / max(1, n_steps))
    return bank


def _record_drift(state: RunState, task_id: int, logger: RunLogger) -> None:
    """Compare carried-over prototypes with freshly measured ones.

    Real prototypes are recomputed from old tasks' training data under the
    current model; this path is evaluation instrumentation only and never
    feeds training.
    """
    real: dict[int, np.ndarray] = {}
    for proto in state.store.prototypes():
        origin = state.metric_archive.get(proto.task_of_origin)
        if origin is None:
            raise ContractError(f"no archived data for task {proto.task_of_origin}")
        group = [s for s in origin if s.label == proto.class_id]
        feats = features_np(state.model, group)
        real[proto.class_id] = feats.mean(axis=0)
    value = prototype_distance(state.store.means(), real)
    state.drift[task_id] = value
    logger.emit("drift_metric", task=task_id, value=value)


def run_task(state: RunState, task: Task, logger: RunLogger | None = None) -> RunState:
    """Run the three-stage protocol for one task, mutating state in place."""
    logger = logger or RunLogger()
    cfg = state.cfg
    traits = cfg.traits()
    t = task.id
    seen = set(state.model.bank.seen_classes())
    overlap = seen.intersection(task.classes)
    if overlap:
        raise ContractError(f"task {t} repeats already-seen classes {sorted(overlap)}")
    if t >= 2 and state.old_model is None:
        raise ContractError(f"task {t} needs the previous model snapshot")

    logger.emit("task_start", task=t, classes=list(task.classes), method=cfg.method)
    old_digest = (_digest(state.old_model.backbone.weight_tensors()
                          + state.old_model.adapter_params()
                          + state.old_model.bank.head_params())
                  if state.old_model is not None else b"")

    t0 = time.perf_counter()
    _train_stage1(state, task, logger)
    t1 = time.perf_counter()
    state.stage_seconds["stage1"] = state.stage_seconds.get("stage1", 0.0) + (t1 - t0)

    if traits.runs_refinement and t >= 2:
        before = _model_sections(state.model)
        if traits.reinit_before_refinement:
            state.dcn.reset()
        refine_compensator(
            state.dcn, state.old_model, state.model, task.train,
            SgdConfig(max_lr=cfg.train.max_lr, batch_size=cfg.train.batch_size,
                      epochs=cfg.train.epochs_s2, momentum=cfg.train.momentum),
            rng=np.random.default_rng(subseed(state.seed, "s2", t)),
            on_epoch=lambda epoch, loss: logger.emit(
                "stage_epoch", task=t, stage=2, epoch=epoch, loss=loss),
        )
        _require_unchanged(before, _model_sections(state.model),
                           ("backbone", "adapters", "heads"), "compensator refinement")
    t2 = time.perf_counter()
    state.stage_seconds["stage2"] = state.stage_seconds.get("stage2", 0.0) + (t2 - t1)
    if t >= 2 and (traits.dc_loss_in_s1 or traits.runs_refinement):
        state.dcn_train_count += 1

    if traits.keeps_store:
        if t >= 2 and len(state.store) > 0:
            if traits.prototype_rule == "dcn":
                update_with_compensator(state.store, state.dcn)
            elif traits.prototype_rule == "sdc":
                update_with_sdc(state.store, state.old_model, state.model, task.train,
                                on_fallback=lambda c: logger.emit("sdc_fallback", task=t, class_id=c))
            _record_drift(state, t, logger)
        state.store.add(compute_prototypes(state.model, task.train, t))
        if traits.retrains_classifier:
            before = _model_sections(state.model)
            dcn_before = state.dcn.weight.data.tobytes() if state.dcn is not None else b""
            retrain_unified(state.model.bank, state.store, cfg.train.samples_per_class,
                            cfg.train, subseed(state.seed, "uct", t),
                            reinit=cfg.train.reinit_heads, logger=logger, task_id=t)
            _require_unchanged(before, _model_sections(state.model),
                               ("backbone", "adapters"), "classifier retraining")
            dcn_after = state.dcn.weight.data.tobytes() if state.dcn is not None else b""
            if dcn_before != dcn_after:
                raise ContractError("freeze violation: compensator changed during retraining")
    t3 = time.perf_counter()
    state.stage_seconds["stage3"] = state.stage_seconds.get("stage3", 0.0) + (t3 - t2)

    # frozen-backbone and snapshot immutability checks, every task
    if _digest(state.model.backbone.weight_tensors()) != state.backbone_digest:
        raise ContractError("freeze violation: backbone weights changed")
    if state.old_model is not None:
        now = _digest(state.old_model.backbone.weight_tensors()
                      + state.old_model.adapter_params()
                      + state.old_model.bank.head_params())
        if now != old_digest:
            raise ContractError("freeze violation: snapshot model changed during the task")

    state.metric_archive[t] = list(task.train)
    state.old_model = state.model.snapshot()
    logger.emit("task_end", task=t, seen_classes=state.model.bank.seen_classes())
    return state


def _evaluate(model: ModelState, samples: Sequence[TimeSeriesSample]) -> float:
    if not samples:
        raise ContractError("cannot evaluate on an empty test set")
    preds = predict_batch(model, samples)
    truth = np.asarray([s.label for s in samples])
    return float((preds == truth).mean())


def run_stream(stream: TaskStream, cfg: StrategyConfig, seed: int,
               logger: RunLogger | None = None) -> tuple[RunReport, RunState]:
    """Run every task in order, evaluating on all seen test sets after each."""
    logger = logger or RunLogger()
    stream.validate()
    if not stream.tasks:
        raise ContractError("empty task stream")
    for task in stream.tasks:
        if not task.train or not task.test:
            raise ContractError(f"task {task.id} needs non-empty train and test splits")

    first = stream.tasks[0].train[0]
    channels, length = first.values.shape
    if cfg.pca_ratio is not None:
        channels = int(np.ceil(cfg.pca_ratio * channels))
    model = build_model(
        channels, length,
        embed_dim=cfg.model.embed_dim, n_blocks=cfg.model.n_blocks,
        bottleneck=cfg.model.bottleneck, patch_len=cfg.model.patch_len,
        adapter_scale=cfg.model.adapter_scale, margin=cfg.model.margin,
        logit_scale=cfg.model.logit_scale, seed=subseed(seed, "backbone"),
    )
    state = RunState(model=model, store=PrototypeStore(), matrix=AccuracyMatrix(),
                     seed=seed, cfg=cfg)

    projections: dict[int, ChannelProjection] = {}
    test_sets: dict[int, list[TimeSeriesSample]] = {}
    for task in stream.tasks:
        if cfg.pca_ratio is not None:
            train_red, val_red, projection = pca_reduce(task.train, task.val, cfg.pca_ratio)
            projections[task.id] = projection
            test_sets[task.id] = [projection.apply_sample(s) for s in task.test]
            task = Task(id=task.id, classes=task.classes, train=train_red,
                        val=val_red, test=test_sets[task.id])
        else:
            test_sets[task.id] = task.test

        run_task(state, task, logger)

        row = [_evaluate(state.model, test_sets[j]) for j in range(1, task.id + 1)]
        state.matrix.add_row(row)
        logger.emit("evaluation", task=task.id, row=row)

    report = RunReport.from_matrix(
        config={"method": cfg.method, "seed": seed},
        matrix=state.matrix,
        drift=state.drift,
        dcn_train_count=state.dcn_train_count,
        stage_seconds=state.stage_seconds,
    )
    logger.emit("run_end", A_T=report.final_accuracy, F_T=report.final_forgetting,
                A_cur=report.learning_accuracy)
    return report, state


@dataclass
class SweepPoint:
    adapter_scale: float
    alpha: float
    report: RunReport


def sweep(grid: Sequence[tuple[float, float]], stream: TaskStream,
          cfg: StrategyConfig, seed: int) -> list[SweepPoint]:
    """One run per (adapter scale, distillation weight) grid point."""
    if not grid:
        raise ContractError("sweep grid must be non-empty")
    points = []
    for scale, alpha in grid:
        point_cfg = replace(
            cfg,
            model=replace(cfg.model, adapter_scale=scale),
            train=replace(cfg.train, alpha=alpha),
        )
        report, _ = run_stream(stream, point_cfg, seed)
        points.append(SweepPoint(adapter_scale=scale, alpha=alpha, report=report))
    return points
