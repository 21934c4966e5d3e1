"""Incremental-learning metrics over the lower-triangular accuracy matrix.

Entry a(i, j) is the accuracy on task j's test set after training on task i
(1-based, j <= i). All metric arithmetic is float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ContractError, DataFormatError


class AccuracyMatrix:
    """Ragged lower-triangular matrix; row i holds a(i, 1..i)."""

    def __init__(self, rows: list[list[float]] | None = None):
        self.rows: list[list[float]] = []
        for row in rows or []:
            self.add_row(row)

    def add_row(self, row: list[float]) -> None:
        expected = len(self.rows) + 1
        if len(row) != expected:
            raise ContractError(f"row {expected} must have {expected} entries, got {len(row)}")
        vals = [float(v) for v in row]
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"accuracy {v} outside [0, 1]")
        self.rows.append(vals)

    @property
    def n_tasks(self) -> int:
        return len(self.rows)

    def a(self, i: int, j: int) -> float:
        """1-based accessor, defined for j <= i."""
        if not 1 <= i <= self.n_tasks or not 1 <= j <= i:
            raise ContractError(f"a({i},{j}) undefined for a {self.n_tasks}-task matrix")
        return self.rows[i - 1][j - 1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in self.rows:
                writer.writerow([repr(v) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "AccuracyMatrix":
        matrix = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row:
                    continue
                try:
                    matrix.add_row([float(v) for v in row])
                except (ValueError, ContractError) as exc:
                    raise DataFormatError(f"{path} row {i}: {exc}") from exc
        return matrix


def avg_accuracy(matrix: AccuracyMatrix, i: int) -> float:
    """Mean accuracy across the first i test sets after training task i."""
    if not 1 <= i <= matrix.n_tasks:
        raise ContractError(f"i={i} outside 1..{matrix.n_tasks}")
    return sum(matrix.a(i, j) for j in range(1, i + 1)) / i


def avg_forgetting(matrix: AccuracyMatrix, i: int) -> float | None:
    """Mean best-minus-final accuracy drop over tasks learned before i.

    Undefined (None) for i < 2. The max over earlier rows only ranges over
    rows where a(k, j) exists, i.e. k >= j.
    """
    if i < 2:
        return None
    if i > matrix.n_tasks:
        raise ContractError(f"i={i} outside 1..{matrix.n_tasks}")
    total = 0.0
    for j in range(1, i):
        best = max(matrix.a(k, j) for k in range(j, i))
        total += best - matrix.a(i, j)
    return total / (i - 1)


def avg_learning_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean of the diagonal: accuracy on each task right after learning it."""
    if matrix.n_tasks < 1:
        raise ContractError("empty accuracy matrix")
    return sum(matrix.a(i, i) for i in range(1, matrix.n_tasks + 1)) / matrix.n_tasks


@dataclass
class RunReport:
    """Everything one stream run produces."""

    config: dict[str, Any]
    matrix: AccuracyMatrix
    accuracy_curve: list[float]                 # A_i for i = 1..T
    final_accuracy: float                       # A_T
    final_forgetting: float | None              # F_T, absent for T < 2
    learning_accuracy: float                    # A_cur
    drift: dict[int, float] = field(default_factory=dict)  # task -> D^t
    dcn_train_count: int = 0
    stage_seconds: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, config: dict[str, Any], matrix: AccuracyMatrix,
                    drift: dict[int, float] | None = None,
                    dcn_train_count: int = 0,
                    stage_seconds: dict[str, float] | None = None) -> "RunReport":
        curve = [avg_accuracy(matrix, i) for i in range(1, matrix.n_tasks + 1)]
        return cls(
            config=config,
            matrix=matrix,
            accuracy_curve=curve,
            final_accuracy=curve[-1],
            final_forgetting=avg_forgetting(matrix, matrix.n_tasks),
            learning_accuracy=avg_learning_accuracy(matrix),
            drift=dict(drift or {}),
            dcn_train_count=dcn_train_count,
            stage_seconds=dict(stage_seconds or {}),
        )

    def metrics_dict(self) -> dict[str, Any]:
        return {
            "A_T": self.final_accuracy,
            "F_T": self.final_forgetting,
            "A_cur": self.learning_accuracy,
            "per_task_A_i": list(self.accuracy_curve),
        }
