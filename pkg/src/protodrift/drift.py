"""Drift compensation network: a bias-free linear map between feature spaces.

The map is trained to carry old-model features onto new-model features. Its
weight starts at the identity at the beginning of every task, and refinement
(the dedicated second training pass) keeps both feature extractors frozen.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import TimeSeriesSample
from .errors import ContractError
from .model import FeatureExtractor, ModelState, features_np, mean_squared_distance
from .optim import SGD, SgdConfig, one_cycle_lr


class DriftCompensator:
    """Square bias-free linear map, identity at construction."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.weight = Tensor(np.eye(dim, dtype=np.float32), requires_grad=True)

    def reset(self) -> None:
        self.weight.data[...] = np.eye(self.dim, dtype=np.float32)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ContractError(f"expected a ({self.dim},) vector, got {vec.shape}")
        return self.weight.data @ vec

    def apply_batch(self, feats: Tensor) -> Tensor:
        """Rows of (B, D) through the map, on the tape."""
        if feats.shape[1] != self.dim:
            raise ContractError(f"expected dim {self.dim}, got {feats.shape[1]}")
        return ag.matmul(feats, ag.transpose(self.weight))

    def copy(self) -> "DriftCompensator":
        dup = DriftCompensator.__new__(DriftCompensator)
        dup.dim = self.dim
        dup.weight = self.weight.copy(requires_grad=True)
        return dup


def drift_loss_from_features(compensator: DriftCompensator,
                             old_feats: Tensor, new_feats: Tensor) -> Tensor:
    """Mean squared distance between projected old features and new features."""
    if old_feats.shape != new_feats.shape:
        raise ContractError(f"feature shapes differ: {old_feats.shape} vs {new_feats.shape}")
    if old_feats.shape[1] != compensator.dim:
        raise ContractError(
            f"compensator dim {compensator.dim} does not match features {old_feats.shape}"
        )
    return mean_squared_distance(compensator.apply_batch(old_feats), new_feats)


def drift_loss(compensator: DriftCompensator,
               old_model: ModelState | FeatureExtractor,
               new_model: ModelState | FeatureExtractor,
               samples: Sequence[TimeSeriesSample]) -> Tensor:
    """Drift loss on raw samples; old features are constants."""
    old_feats = Tensor(features_np(old_model, samples))
    new_feats = Tensor(features_np(new_model, samples))
    return drift_loss_from_features(compensator, old_feats, new_feats)


def refine_compensator(compensator: DriftCompensator,
                       old_model: ModelState | FeatureExtractor,
                       new_model: ModelState | FeatureExtractor,
                       train_data: Sequence[TimeSeriesSample],
                       cfg: SgdConfig | None = None,
                       rng: np.random.Generator | None = None,
                       on_epoch=None) -> DriftCompensator:
    """Dedicated refinement pass: both extractors frozen, only the map trains.

    Training continues from the compensator's current state; callers that
    want the from-scratch variant reset it first. on_epoch, when given, is
    called with (epoch, mean loss) after every epoch.
    """
    if not train_data:
        raise ContractError("refinement requires non-empty training data")
    cfg = cfg or SgdConfig()
    rng = rng or np.random.default_rng(0)
    old_np = features_np(old_model, train_data)
    new_np = features_np(new_model, train_data)
    n = old_np.shape[0]
    n_batches = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    optimizer = SGD([compensator.weight], momentum=cfg.momentum)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_steps = 0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            loss = drift_loss_from_features(
                compensator, Tensor(old_np[idx]), Tensor(new_np[idx])
            )
            grads = ag.grad(loss, [compensator.weight])
            optimizer.step(grads, one_cycle_lr(step, total_steps, cfg.max_lr))
            step += 1
            epoch_loss += loss.item()
            n_steps += 1
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss / max(1, n_steps))
    return compensator
