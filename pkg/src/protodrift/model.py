"""Frozen feature backbone, residual adapters, cosine heads and their losses.

The backbone is a small deterministic patch network: non-overlapping
channel-major patches are embedded and passed through residual MLP blocks,
with one trainable bottleneck adapter after each block, then mean-pooled
over patches into a single feature vector. Backbone weights never train.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .data import TimeSeriesSample
from .errors import ContractError

FeatureExtractor = Callable[[np.ndarray], np.ndarray]

_ZERO_NORM_TOL = 1e-12


def _seeded_normal(rng: np.random.Generator, scale: float, shape) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(np.float32)


@dataclass
class _Block:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class FrozenBackbone:
    """Deterministic patch-embedding network; all weights requires_grad=False."""

    def __init__(self, channels: int, length: int, embed_dim: int = 32,
                 n_blocks: int = 2, patch_len: int | None = None, seed: int = 0):
        if patch_len is None:
            patch_len = max(1, round(length / 8))
        if patch_len < 1:
            raise ContractError(f"patch_len must be >= 1, got {patch_len}")
        if length < patch_len:
            raise ContractError(f"series length {length} shorter than patch_len {patch_len}")
        self.channels = channels
        self.length = length
        self.patch_len = patch_len
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.hidden_dim = 2 * embed_dim
        # keeps pooled feature norms O(1) so squared-distance losses stay
        # well-conditioned at the default learning rate
        self.out_scale = 1.0 / math.sqrt(embed_dim)
        in_dim = channels * patch_len
        rng = np.random.default_rng(seed)
        self.w_embed = Tensor(_seeded_normal(rng, 1.0 / math.sqrt(in_dim), (in_dim, embed_dim)))
        self.b_embed = Tensor(_seeded_normal(rng, 0.02, (embed_dim,)))
        self.blocks: list[_Block] = []
        for _ in range(n_blocks):
            self.blocks.append(_Block(
                w1=Tensor(_seeded_normal(rng, math.sqrt(2.0 / embed_dim), (embed_dim, self.hidden_dim))),
                b1=Tensor(_seeded_normal(rng, 0.02, (self.hidden_dim,))),
                w2=Tensor(_seeded_normal(rng, math.sqrt(2.0 / self.hidden_dim), (self.hidden_dim, embed_dim))),
                b2=Tensor(_seeded_normal(rng, 0.02, (embed_dim,))),
            ))

    def weight_tensors(self) -> list[Tensor]:
        out = [self.w_embed, self.b_embed]
        for blk in self.blocks:
            out.extend([blk.w1, blk.b1, blk.w2, blk.b2])
        return out

    def patchify(self, values: np.ndarray) -> np.ndarray:
        """(C, L) -> (n_patches, C*patch_len), channel-major within each patch."""
        values = np.asarray(values, dtype=np.float32)
        c, length = values.shape
        if c != self.channels:
            raise ContractError(f"expected {self.channels} channels, got {c}")
        if length < self.patch_len:
            raise ContractError(f"series length {length} shorter than patch_len {self.patch_len}")
        n_patches = length // self.patch_len
        trimmed = values[:, : n_patches * self.patch_len]
        patches = trimmed.reshape(c, n_patches, self.patch_len)
        return np.transpose(patches, (1, 0, 2)).reshape(n_patches, c * self.patch_len)

    def copy(self) -> "FrozenBackbone":
        dup = FrozenBackbone.__new__(FrozenBackbone)
        dup.channels = self.channels
        dup.length = self.length
        dup.patch_len = self.patch_len
        dup.embed_dim = self.embed_dim
        dup.n_blocks = self.n_blocks
        dup.hidden_dim = self.hidden_dim
        dup.out_scale = self.out_scale
        dup.w_embed = self.w_embed.copy(requires_grad=False)
        dup.b_embed = self.b_embed.copy(requires_grad=False)
        dup.blocks = [
            _Block(blk.w1.copy(requires_grad=False), blk.b1.copy(requires_grad=False),
                   blk.w2.copy(requires_grad=False), blk.b2.copy(requires_grad=False))
            for blk in self.blocks
        ]
        return dup


class Adapter:
    """Residual bottleneck: out = x + relu(scale * (x @ w_down)) @ w_up.

    w_up starts at zero, so a fresh adapter is exactly the identity.
    """

    def __init__(self, embed_dim: int, bottleneck: int, scale: float = 1.0, seed: int = 0):
        if bottleneck >= embed_dim:
            raise ContractError(f"bottleneck {bottleneck} must be smaller than embed_dim {embed_dim}")
        rng = np.random.default_rng(seed)
        self.w_down = Tensor(_seeded_normal(rng, 0.02, (embed_dim, bottleneck)), requires_grad=True)
        self.w_up = Tensor(np.zeros((bottleneck, embed_dim), dtype=np.float32), requires_grad=True)
        self.scale = float(scale)

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(x, self)

    def params(self) -> list[Tensor]:
        return [self.w_down, self.w_up]

    def copy(self, requires_grad: bool = True) -> "Adapter":
        dup = Adapter.__new__(Adapter)
        dup.w_down = self.w_down.copy(requires_grad=requires_grad)
        dup.w_up = self.w_up.copy(requires_grad=requires_grad)
        dup.scale = self.scale
        return dup


def adapter_forward(x: Tensor, adapter: Adapter) -> Tensor:
    """Apply the residual bottleneck to rows of x (.. x D)."""
    if x.shape[-1] != adapter.w_down.shape[0]:
        raise ContractError(
            f"adapter expects inner dim {adapter.w_down.shape[0]}, got {x.shape[-1]}"
        )
    hidden = ag.relu(ag.mul(ag.matmul(x, adapter.w_down), Tensor(adapter.scale)))
    return ag.add(x, ag.matmul(hidden, adapter.w_up))


class CosineHead:
    """Per-task classifier rows, one weight vector per class."""

    def __init__(self, task_id: int, class_ids: Sequence[int], embed_dim: int, seed: int = 0):
        self.task_id = task_id
        self.class_ids = tuple(sorted(int(c) for c in class_ids))
        rng = np.random.default_rng(seed)
        self.weights = Tensor(_seeded_normal(rng, 0.02, (len(self.class_ids), embed_dim)),
                              requires_grad=True)

    def copy(self, requires_grad: bool = True) -> "CosineHead":
        dup = CosineHead.__new__(CosineHead)
        dup.task_id = self.task_id
        dup.class_ids = self.class_ids
        dup.weights = self.weights.copy(requires_grad=requires_grad)
        return dup


class HeadBank:
    """All per-task heads plus the shared margin / logit-scale settings."""

    def __init__(self, margin: float = 0.1, logit_scale: float = 10.0):
        self.heads: list[CosineHead] = []
        self.margin = float(margin)
        self.logit_scale = float(logit_scale)

    def append(self, head: CosineHead) -> None:
        overlap = set(self.seen_classes()).intersection(head.class_ids)
        if overlap:
            raise ContractError(f"classes {sorted(overlap)} already covered by an earlier head")
        self.heads.append(head)

    def seen_classes(self) -> list[int]:
        """All covered class ids, ascending."""
        ids: list[int] = []
        for head in self.heads:
            ids.extend(head.class_ids)
        return sorted(ids)

    def class_index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.seen_classes())}

    def head_params(self) -> list[Tensor]:
        return [h.weights for h in self.heads]

    def stacked_weights(self, train_task: int | None = None) -> tuple[Tensor, np.ndarray]:
        """Concatenated head rows plus the permutation into ascending class order.

        When train_task is given, every other head is detached so gradients
        only reach the head being trained.
        """
        if not self.heads:
            raise ContractError("head bank is empty")
        blocks = []
        bank_order: list[int] = []
        for head in self.heads:
            w = head.weights
            if train_task is not None and head.task_id != train_task:
                w = w.detach()
            blocks.append(w)
            bank_order.extend(head.class_ids)
        stacked = blocks[0] if len(blocks) == 1 else ag.concat(blocks, axis=0)
        ascending = np.argsort(np.asarray(bank_order))
        return stacked, ascending

    def copy(self, requires_grad: bool = True) -> "HeadBank":
        dup = HeadBank(margin=self.margin, logit_scale=self.logit_scale)
        dup.heads = [h.copy(requires_grad=requires_grad) for h in self.heads]
        return dup


class ModelState:
    """Frozen backbone + shared adapters + head bank."""

    def __init__(self, backbone: FrozenBackbone, adapters: list[Adapter], bank: HeadBank):
        if len(adapters) != backbone.n_blocks:
            raise ContractError(
                f"need one adapter per block: {len(adapters)} adapters, {backbone.n_blocks} blocks"
            )
        self.backbone = backbone
        self.adapters = adapters
        self.bank = bank

    @property
    def embed_dim(self) -> int:
        return self.backbone.embed_dim

    def adapter_params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for a in self.adapters:
            out.extend(a.params())
        return out

    def snapshot(self) -> "ModelState":
        """Deep frozen copy; training this model never changes the copy."""
        dup = ModelState.__new__(ModelState)
        dup.backbone = self.backbone.copy()
        dup.adapters = [a.copy(requires_grad=False) for a in self.adapters]
        dup.bank = self.bank.copy(requires_grad=False)
        return dup


def build_model(channels: int, length: int, embed_dim: int = 32, n_blocks: int = 2,
                bottleneck: int | None = None, patch_len: int | None = None,
                adapter_scale: float = 1.0, margin: float = 0.1,
                logit_scale: float = 10.0, seed: int = 0) -> ModelState:
    """Assemble a fresh model; adapters start as exact identities."""
    if bottleneck is None:
        bottleneck = max(1, embed_dim // 4)
    backbone = FrozenBackbone(channels, length, embed_dim=embed_dim, n_blocks=n_blocks,
                              patch_len=patch_len, seed=seed)
    adapters = [Adapter(embed_dim, bottleneck, scale=adapter_scale, seed=seed + 1 + i)
                for i in range(n_blocks)]
    return ModelState(backbone, adapters, HeadBank(margin=margin, logit_scale=logit_scale))


def _forward_features(backbone: FrozenBackbone, adapters: list[Adapter] | None,
                      values_batch: list[np.ndarray]) -> Tensor:
    """Run a batch of raw series through the network; returns (B, D)."""
    patch_rows = [backbone.patchify(v) for v in values_batch]
    n_patches = patch_rows[0].shape[0]
    for rows in patch_rows[1:]:
        if rows.shape[0] != n_patches:
            raise ContractError("all samples in a batch must yield the same patch count")
    x = Tensor(np.concatenate(patch_rows, axis=0))  # (B*n_patches, P)
    h = ag.add(ag.matmul(x, backbone.w_embed), backbone.b_embed)
    for i, blk in enumerate(backbone.blocks):
        inner = ag.relu(ag.add(ag.matmul(h, blk.w1), blk.b1))
        h = ag.add(h, ag.add(ag.matmul(inner, blk.w2), blk.b2))
        if adapters is not None:
            h = adapters[i](h)
    batch = len(values_batch)
    h3 = ag.reshape(h, (batch, n_patches, backbone.embed_dim))
    return ag.mul(ag.tmean(h3, axis=1), Tensor(backbone.out_scale))


def extract_features_batch(model: ModelState, samples: Sequence[TimeSeriesSample]) -> Tensor:
    return _forward_features(model.backbone, model.adapters, [s.values for s in samples])


def extract_features(model: ModelState, sample: TimeSeriesSample) -> Tensor:
    """Feature vector (D,) for a single sample."""
    feats = extract_features_batch(model, [sample])
    return ag.reshape(feats, (model.embed_dim,))


def backbone_features_batch(backbone: FrozenBackbone,
                            samples: Sequence[TimeSeriesSample]) -> Tensor:
    """Features with no adapters in the path (pure frozen network)."""
    return _forward_features(backbone, None, [s.values for s in samples])


def features_np(extractor: ModelState | FeatureExtractor,
                samples: Sequence[TimeSeriesSample]) -> np.ndarray:
    """(B, D) numpy features with no tape, from a model or a plain callable."""
    if isinstance(extractor, ModelState):
        with no_grad():
            return extract_features_batch(extractor, samples).data.copy()
    return np.stack([np.asarray(extractor(s.values), dtype=np.float32) for s in samples])


def _normalize_rows(x: Tensor) -> Tensor:
    sq = ag.tsum(ag.mul(x, x), axis=1, keepdims=True)
    if np.any(sq.data < _ZERO_NORM_TOL):
        raise ContractError("cosine similarity undefined for zero-norm vectors")
    return ag.mul(x, ag.power(sq, -0.5))


def cosine_logits_batch(features: Tensor, bank: HeadBank,
                        train_task: int | None = None) -> Tensor:
    """(B, K_seen) cosine similarities, columns in ascending class-id order."""
    stacked, ascending = bank.stacked_weights(train_task=train_task)
    f_norm = _normalize_rows(features)
    w_norm = _normalize_rows(stacked)
    logits = ag.matmul(f_norm, ag.transpose(w_norm))
    return ag.gather_cols(logits, ascending)


def cosine_logits(feature: Tensor, bank: HeadBank) -> Tensor:
    """Cosine similarity of one feature vector against every seen class."""
    f2 = ag.reshape(feature, (1, feature.data.size))
    return ag.reshape(cosine_logits_batch(f2, bank), (len(bank.seen_classes()),))


def _one_hot(labels: Sequence[int], index: dict[int, int], n_cols: int) -> np.ndarray:
    out = np.zeros((len(labels), n_cols), dtype=np.float32)
    for r, lab in enumerate(labels):
        out[r, index[lab]] = 1.0
    return out


def cosine_margin_loss(features: Tensor, labels: Sequence[int], bank: HeadBank,
                       current_task: int) -> Tensor:
    """Margin-penalized cosine softmax CE over all seen classes.

    Gradients reach the current task's head and whatever produced the
    features; earlier heads are detached and receive exactly zero gradient.
    """
    current = next((h for h in bank.heads if h.task_id == current_task), None)
    if current is None:
        raise ContractError(f"no head registered for task {current_task}")
    allowed = set(current.class_ids)
    for lab in labels:
        if lab not in allowed:
            raise ContractError(f"label {lab} outside current task classes {sorted(allowed)}")
    logits = cosine_logits_batch(features, bank, train_task=current_task)
    index = bank.class_index()
    onehot = Tensor(_one_hot(labels, index, logits.shape[1]))
    adjusted = ag.mul(ag.sub(logits, ag.mul(onehot, Tensor(bank.margin))), Tensor(bank.logit_scale))
    logp = ag.log_softmax(adjusted)
    picked = ag.tsum(ag.mul(logp, onehot))
    return ag.mul(picked, Tensor(-1.0 / len(labels)))


def feature_distillation_loss(old_model: ModelState | FeatureExtractor,
                              new_model: ModelState | FeatureExtractor,
                              samples: Sequence[TimeSeriesSample]) -> Tensor:
    """Mean squared L2 distance between old and new features on a batch.

    The old model's features are constants; gradient flows only into the new
    model's adapters (a plain-callable new extractor yields no gradient).
    """
    old_feats = Tensor(features_np(old_model, samples))
    if isinstance(new_model, ModelState):
        new_feats = extract_features_batch(new_model, samples)
    else:
        new_feats = Tensor(features_np(new_model, samples))
    if old_feats.shape[1] != new_feats.shape[1]:
        raise ContractError(
            f"feature dims differ: old {old_feats.shape[1]}, new {new_feats.shape[1]}"
        )
    return mean_squared_distance(old_feats, new_feats)


def mean_squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of the squared L2 row distance."""
    if a.shape != b.shape:
        raise ContractError(f"feature shapes differ: {a.shape} vs {b.shape}")
    diff = ag.sub(a, b)
    return ag.mul(ag.tsum(ag.mul(diff, diff)), Tensor(1.0 / a.shape[0]))


def unified_ce_loss(features: Tensor, labels: Sequence[int], bank: HeadBank) -> Tensor:
    """Plain-linear-logit CE over all seen classes; every head gets gradient."""
    stacked, ascending = bank.stacked_weights()
    logits = ag.gather_cols(ag.matmul(features, ag.transpose(stacked)), ascending)
    index = bank.class_index()
    for lab in labels:
        if lab not in index:
            raise ContractError(f"label {lab} is not a seen class")
    onehot = Tensor(_one_hot(labels, index, logits.shape[1]))
    logp = ag.log_softmax(logits)
    picked = ag.tsum(ag.mul(logp, onehot))
    return ag.mul(picked, Tensor(-1.0 / len(labels)))


def classify_features(bank: HeadBank, features: np.ndarray) -> np.ndarray:
    """Cosine-argmax labels for precomputed feature rows."""
    with no_grad():
        logits = cosine_logits_batch(Tensor(np.asarray(features, dtype=np.float32)), bank).data
    classes = np.asarray(bank.seen_classes())
    return classes[np.argmax(logits, axis=1)]


def predict_batch(model: ModelState, samples: Sequence[TimeSeriesSample]) -> np.ndarray:
    """Argmax of cosine logits; ties break toward the lowest class id."""
    if not model.bank.heads:
        raise ContractError("cannot predict with an empty head bank")
    with no_grad():
        feats = extract_features_batch(model, samples)
        logits = cosine_logits_batch(feats, model.bank).data
    classes = np.asarray(model.bank.seen_classes())
    return classes[np.argmax(logits, axis=1)]


def predict(model: ModelState, sample: TimeSeriesSample) -> int:
    return int(predict_batch(model, [sample])[0])
