"""Scikit-learn style wrappers so the engine composes with pipelines.

``ContinualTimeSeriesClassifier`` treats each ``partial_fit`` call as one
incremental task over previously unseen classes; ``predict`` covers every
class seen so far. ``ChannelPCA`` is the per-task channel reducer as a plain
transformer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .data import Task, TimeSeriesSample, fit_channel_projection
from .errors import ContractError
from .metrics import AccuracyMatrix
from .model import build_model, predict_batch
from .protocol import (
    METHODS,
    ModelConfig,
    RunLogger,
    RunState,
    StrategyConfig,
    TrainConfig,
    run_task,
    subseed,
)
from .prototypes import PrototypeStore
from .validation import as_samples, check_series_batch


class ChannelPCA(BaseEstimator, TransformerMixin):
    """Project channels onto their leading principal components.

    Parameters
    ----------
    ratio : fraction of channels to keep; ceil(ratio * C) components.
    """

    def __init__(self, ratio: float = 1.0):
        self.ratio = ratio

    def fit(self, X, y=None):
        arr = check_series_batch(X)
        self.projection_ = fit_channel_projection(list(arr), self.ratio)
        self.n_channels_in_ = arr.shape[1]
        self.n_channels_out_ = self.projection_.components.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "projection_"):
            raise ContractError("ChannelPCA must be fitted before transform")
        arr = check_series_batch(X)
        if arr.shape[1] != self.n_channels_in_:
            raise ContractError(
                f"fitted on {self.n_channels_in_} channels, got {arr.shape[1]}"
            )
        return np.stack([self.projection_.apply(v) for v in arr])


class ContinualTimeSeriesClassifier(BaseEstimator, ClassifierMixin):
    """Class-incremental classifier with drift-compensated prototype rehearsal.

    Each ``partial_fit(X, y)`` call is one task whose classes must be new;
    the model keeps a single unified prediction surface over all classes
    seen so far. Every class in a task needs at least 2 samples.
    """

    def __init__(self, method: str = "FULL", embed_dim: int = 32, n_blocks: int = 2,
                 bottleneck: int = 8, patch_len: int | None = None,
                 adapter_scale: float = 1.0, logit_scale: float = 10.0,
                 margin: float = 0.1, alpha: float = 0.1, beta: float = 1.0,
                 samples_per_class: int = 256, epochs_s1: int = 30,
                 epochs_s2: int = 20, epochs_s3: int = 20, max_lr: float = 0.005,
                 batch_size: int = 16, momentum: float = 0.9, random_state: int = 0):
        self.method = method
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.bottleneck = bottleneck
        self.patch_len = patch_len
        self.adapter_scale = adapter_scale
        self.logit_scale = logit_scale
        self.margin = margin
        self.alpha = alpha
        self.beta = beta
        self.samples_per_class = samples_per_class
        self.epochs_s1 = epochs_s1
        self.epochs_s2 = epochs_s2
        self.epochs_s3 = epochs_s3
        self.max_lr = max_lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state

    def _strategy(self) -> StrategyConfig:
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        return StrategyConfig(
            method=self.method,
            model=ModelConfig(embed_dim=self.embed_dim, n_blocks=self.n_blocks,
                              bottleneck=self.bottleneck, patch_len=self.patch_len,
                              adapter_scale=self.adapter_scale,
                              logit_scale=self.logit_scale, margin=self.margin),
            train=TrainConfig(max_lr=self.max_lr, batch_size=self.batch_size,
                              epochs_s1=self.epochs_s1, epochs_s2=self.epochs_s2,
                              epochs_s3=self.epochs_s3, alpha=self.alpha,
                              beta=self.beta, samples_per_class=self.samples_per_class,
                              momentum=self.momentum),
        )

    def partial_fit(self, X, y):
        samples = as_samples(X, y)
        classes = tuple(sorted({s.label for s in samples}))
        if not hasattr(self, "state_"):
            channels, length = samples[0].values.shape
            cfg = self._strategy()
            model = build_model(channels, length, embed_dim=cfg.model.embed_dim,
                                n_blocks=cfg.model.n_blocks, bottleneck=cfg.model.bottleneck,
                                patch_len=cfg.model.patch_len,
                                adapter_scale=cfg.model.adapter_scale,
                                margin=cfg.model.margin, logit_scale=cfg.model.logit_scale,
                                seed=subseed(self.random_state, "backbone"))
            self.state_ = RunState(model=model, store=PrototypeStore(),
                                   matrix=AccuracyMatrix(), seed=self.random_state, cfg=cfg)
            self.n_tasks_ = 0
        task = Task(id=self.n_tasks_ + 1, classes=classes, train=samples)
        run_task(self.state_, task, RunLogger())
        self.n_tasks_ += 1
        self.classes_ = np.asarray(self.state_.model.bank.seen_classes())
        return self

    def fit(self, X, y):
        """Single-task fit over all classes in y (resets any previous state)."""
        for attr in ("state_", "n_tasks_", "classes_"):
            if hasattr(self, attr):
                delattr(self, attr)
        return self.partial_fit(X, y)

    def predict(self, X):
        if not hasattr(self, "state_"):
            raise ContractError("classifier has not been fitted yet")
        arr = check_series_batch(X)
        samples = [TimeSeriesSample(arr[i], 0) for i in range(arr.shape[0])]
        return predict_batch(self.state_.model, samples)
