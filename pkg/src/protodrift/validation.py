"""Input validation helpers for the array-facing (estimator) API."""

from __future__ import annotations

import numpy as np

from .data import TimeSeriesSample
from .errors import ContractError


def check_series_batch(X) -> np.ndarray:
    """Coerce to a finite float32 array of shape (n_samples, channels, length)."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 3:
        raise ContractError(
            f"expected a 3-D array (n_samples, channels, length), got shape {arr.shape}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ContractError(f"all extents must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("input contains non-finite values")
    return arr


def check_labels(y, n_samples: int) -> np.ndarray:
    """Coerce labels to non-negative int64 of length n_samples."""
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != n_samples:
        raise ContractError(f"labels must be 1-D of length {n_samples}, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if not np.allclose(arr, rounded):
            raise ContractError("labels must be integers")
        arr = rounded
    arr = arr.astype(np.int64)
    if (arr < 0).any():
        raise ContractError("labels must be non-negative")
    return arr


def as_samples(X, y) -> list[TimeSeriesSample]:
    """Bundle validated arrays into the internal sample type."""
    arr = check_series_batch(X)
    labels = check_labels(y, arr.shape[0])
    return [TimeSeriesSample(arr[i], int(labels[i])) for i in range(arr.shape[0])]
