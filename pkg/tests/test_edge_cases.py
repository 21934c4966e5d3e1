"""Edge-path coverage: malformed files, degenerate schedules, bad indices."""

import numpy as np
import pytest

from protodrift.checkpoint import load_checkpoint, save_checkpoint
from protodrift.data import TimeSeriesSample
from protodrift.errors import ContractError, DataFormatError
from protodrift.metrics import AccuracyMatrix
from protodrift.model import CosineHead, HeadBank, build_model, cosine_logits
from protodrift.optim import one_cycle_lr
from protodrift.autograd import Tensor
from protodrift.prototypes import (
    ClassPrototype,
    PrototypeStore,
    load_prototypes,
    save_prototypes,
)


def test_one_cycle_tiny_schedules():
    # degenerate totals still produce positive rates inside range
    for total in (2, 3):
        values = [one_cycle_lr(s, total, 0.01) for s in range(total)]
        assert all(v > 0 for v in values)
        assert values[0] == pytest.approx(0.01 / 25.0)


def test_accuracy_matrix_bad_indices():
    m = AccuracyMatrix([[0.5], [0.5, 0.5]])
    with pytest.raises(ContractError):
        m.a(3, 1)
    with pytest.raises(ContractError):
        m.a(1, 2)
    with pytest.raises(ContractError):
        m.a(0, 0)


def test_checkpoint_truncated_file(tmp_path):
    model = build_model(2, 32, seed=0)
    model.bank.append(CosineHead(1, [0, 1], model.embed_dim, seed=0))
    path = tmp_path / "model.bin"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "cut.bin")


def test_prototype_load_rejects_missing_cov(tmp_path):
    store = PrototypeStore()
    store.add([ClassPrototype(0, np.zeros(3), np.eye(3), 1),
               ClassPrototype(1, np.ones(3), np.eye(3), 1)])
    csv_path = tmp_path / "p.csv"
    cov_path = tmp_path / "p.cov.bin"
    save_prototypes(store, csv_path, cov_path)
    # drop class 1's row from the CSV and re-point class ids so they mismatch
    lines = csv_path.read_text().splitlines()
    lines[1] = lines[1].replace("0,1,", "7,1,", 1)
    csv_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError):
        load_prototypes(csv_path, cov_path)


def test_prototype_dump_rejects_empty_store(tmp_path):
    with pytest.raises(ContractError):
        save_prototypes(PrototypeStore(), tmp_path / "a.csv", tmp_path / "a.bin")


def test_cosine_logits_empty_bank():
    with pytest.raises(ContractError):
        cosine_logits(Tensor([1.0, 0.0]), HeadBank())


def test_head_bank_rejects_overlapping_heads():
    bank = HeadBank()
    bank.append(CosineHead(1, [0, 1], 4, seed=0))
    with pytest.raises(ContractError):
        bank.append(CosineHead(2, [1, 2], 4, seed=0))


def test_sample_rejects_bad_values():
    with pytest.raises(ContractError):
        TimeSeriesSample(np.array([[np.inf, 0.0]]), 0)
    with pytest.raises(ContractError):
        TimeSeriesSample(np.zeros((2, 2)), -1)
    with pytest.raises(ContractError):
        TimeSeriesSample(np.zeros(4), 0)
