import math
from types import SimpleNamespace

import numpy as np
import pytest
from gradcheck import fd_grad, rel_err

from protodrift.autograd import Tensor, grad
from protodrift.data import SyntheticSpec, TimeSeriesSample, make_synthetic
from protodrift.errors import ContractError
from protodrift.model import (
    Adapter,
    CosineHead,
    HeadBank,
    adapter_forward,
    backbone_features_batch,
    build_model,
    classify_features,
    cosine_logits,
    cosine_margin_loss,
    extract_features,
    extract_features_batch,
    feature_distillation_loss,
    features_np,
    predict,
    predict_batch,
    unified_ce_loss,
)
from protodrift.optim import sgd_step


def _samples(n=6, channels=3, length=64, seed=0, classes=2):
    spec = SyntheticSpec(n_classes=classes, channels=channels, length=length,
                         n_per_class=max(8, n))
    return make_synthetic(spec, seed)[:n]


def _bank_with_head(weights, task_id=1, class_ids=None, margin=0.1, scale=10.0):
    weights = np.asarray(weights, dtype=np.float32)
    class_ids = class_ids or list(range(weights.shape[0]))
    bank = HeadBank(margin=margin, logit_scale=scale)
    head = CosineHead(task_id, class_ids, weights.shape[1], seed=0)
    head.weights.data[...] = weights
    bank.append(head)
    return bank


# ---------------------------------------------------------------- adapters

def test_adapter_identity_at_init():
    adapter = Adapter(embed_dim=8, bottleneck=2, scale=1.0, seed=3)
    x = Tensor(np.random.default_rng(0).normal(size=(4, 8)))
    out = adapter(x)
    assert np.array_equal(out.data, x.data)


def test_adapter_zero_scale_is_identity():
    adapter = Adapter(embed_dim=8, bottleneck=2, scale=0.0, seed=3)
    adapter.w_up.data[...] = np.random.default_rng(1).normal(size=adapter.w_up.shape)
    x = Tensor(np.random.default_rng(2).normal(size=(4, 8)))
    assert np.array_equal(adapter(x).data, x.data)


def test_adapter_hand_value():
    # out = x + relu(s * x @ w_down) @ w_up with scalar weights
    stub = SimpleNamespace(w_down=Tensor([[2.0]]), w_up=Tensor([[3.0]]), scale=1.0)
    out = adapter_forward(Tensor([[1.0]]), stub)
    assert out.data[0, 0] == pytest.approx(7.0)


def test_adapter_rejects_wide_bottleneck():
    with pytest.raises(ContractError):
        Adapter(embed_dim=4, bottleneck=4)


def test_adapter_dim_mismatch():
    adapter = Adapter(embed_dim=8, bottleneck=2)
    with pytest.raises(ContractError):
        adapter(Tensor(np.zeros((2, 5))))


# ---------------------------------------------------------------- features

def test_identity_adapters_match_pure_backbone():
    model = build_model(3, 64, seed=11)
    samples = _samples(4)
    with_adapters = extract_features_batch(model, samples).data
    pure = backbone_features_batch(model.backbone, samples).data
    assert np.array_equal(with_adapters, pure)


def test_extract_features_deterministic():
    model = build_model(3, 64, seed=1)
    sample = _samples(1)[0]
    f1 = extract_features(model, sample).data
    f2 = extract_features(model, sample).data
    assert np.array_equal(f1, f2)


def test_extract_features_distinct_classes_distinct_features():
    model = build_model(3, 64, seed=1)
    spec = SyntheticSpec(n_classes=2, channels=3, length=64, n_per_class=8)
    samples = make_synthetic(spec, 4)
    f0 = extract_features(model, samples[0]).data
    f1 = extract_features(model, [s for s in samples if s.label == 1][0]).data
    assert np.linalg.norm(f0 - f1) > 0


def test_extract_features_rejects_short_series():
    model = build_model(3, 64, seed=1)
    short = TimeSeriesSample(np.zeros((3, 4), dtype=np.float32), 0)
    with pytest.raises(ContractError):
        extract_features(model, short)


# ---------------------------------------------------------------- snapshot

def _train_steps(model, samples, labels, task_id, steps=10):
    params = model.adapter_params() + [model.bank.heads[-1].weights]
    state: dict[int, np.ndarray] = {}
    for _ in range(steps):
        feats = extract_features_batch(model, samples)
        loss = cosine_margin_loss(feats, labels, model.bank, task_id)
        grads = grad(loss, params)
        sgd_step(params, grads, lr=0.05, momentum_state=state)


def test_snapshot_frozen_under_training():
    model = build_model(3, 64, seed=2)
    samples = _samples(6)
    labels = [s.label for s in samples]
    model.bank.append(CosineHead(1, [0, 1], model.embed_dim, seed=5))
    snap = model.snapshot()
    probe = samples[0]
    before = extract_features(snap, probe).data.copy()
    _train_steps(model, samples, labels, task_id=1)
    after_snap = extract_features(snap, probe).data
    assert np.array_equal(before, after_snap)
    # the live model actually moved
    assert not np.array_equal(extract_features(model, probe).data, before)


def test_snapshot_of_untouched_model_matches():
    model = build_model(3, 64, seed=2)
    sample = _samples(1)[0]
    snap = model.snapshot()
    assert np.array_equal(
        extract_features(snap, sample).data, extract_features(model, sample).data
    )


def test_snapshots_at_different_times_differ():
    model = build_model(3, 64, seed=2)
    samples = _samples(6)
    labels = [s.label for s in samples]
    model.bank.append(CosineHead(1, [0, 1], model.embed_dim, seed=5))
    snap1 = model.snapshot()
    _train_steps(model, samples, labels, task_id=1)
    snap2 = model.snapshot()
    probe = samples[0]
    assert not np.array_equal(
        extract_features(snap1, probe).data, extract_features(snap2, probe).data
    )


# ---------------------------------------------------------------- cosine head

def test_cosine_logits_orthonormal_case():
    bank = _bank_with_head([[1.0, 0.0], [0.0, 1.0]])
    logits = cosine_logits(Tensor([1.0, 0.0]), bank)
    assert np.allclose(logits.data, [1.0, 0.0], atol=1e-6)


def test_cosine_logits_scale_invariant():
    bank = _bank_with_head(np.random.default_rng(0).normal(size=(3, 4)), class_ids=[0, 1, 2])
    f = np.random.default_rng(1).normal(size=4).astype(np.float32)
    base = cosine_logits(Tensor(f), bank).data
    scaled = cosine_logits(Tensor(3.5 * f), bank).data
    assert np.allclose(base, scaled, atol=1e-6)


def test_cosine_logits_hand_value():
    bank = _bank_with_head([[1.0, 0.0]], class_ids=[0])
    logits = cosine_logits(Tensor([1.0, 1.0]), bank)
    assert logits.data[0] == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-6)


def test_cosine_logits_zero_norm_rejected():
    bank = _bank_with_head([[1.0, 0.0]])
    with pytest.raises(ContractError):
        cosine_logits(Tensor([0.0, 0.0]), bank)


def test_cosine_logits_ascending_class_order():
    # head rows cover interleaved ids across two tasks
    bank = HeadBank()
    h1 = CosineHead(1, [5, 2], 2, seed=0)
    h1.weights.data[...] = [[1.0, 0.0], [0.0, 1.0]]  # rows sorted by id: 2 then 5
    h2 = CosineHead(2, [0, 7], 2, seed=0)
    h2.weights.data[...] = [[1.0, 1.0], [1.0, -1.0]]
    bank.append(h1)
    bank.append(h2)
    assert bank.seen_classes() == [0, 2, 5, 7]
    f = Tensor([1.0, 0.0])
    logits = cosine_logits(f, bank).data
    expected = [1.0 / math.sqrt(2), 1.0, 0.0, 1.0 / math.sqrt(2)]  # ids 0,2,5,7
    assert np.allclose(logits, expected, atol=1e-6)


# ---------------------------------------------------------------- losses

def test_cosine_margin_loss_uniform_is_ln2():
    bank = _bank_with_head([[0.6, 0.8], [0.6, 0.8]], margin=0.0, scale=1.0)
    feats = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    loss = cosine_margin_loss(feats, [0], bank, current_task=1)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_cosine_margin_loss_hand_value():
    # cos = (0.9, 0.1), s_c = 10, m = 0.1 -> CE of softmax((8, 1))
    w = np.array([[0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(1 - 0.01)]])
    bank = _bank_with_head(w, margin=0.1, scale=10.0)
    loss = cosine_margin_loss(Tensor([[1.0, 0.0]]), [0], bank, current_task=1)
    expected = math.log1p(math.exp(-7.0))
    assert loss.item() == pytest.approx(expected, abs=1e-6)


def test_cosine_margin_loss_blocks_old_heads():
    rng = np.random.default_rng(0)
    bank = HeadBank()
    old = CosineHead(1, [0, 1], 4, seed=1)
    new = CosineHead(2, [2, 3], 4, seed=2)
    bank.append(old)
    bank.append(new)
    feats = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    loss = cosine_margin_loss(feats, [2, 3, 2, 3, 2], bank, current_task=2)
    g_old, g_new = grad(loss, [old.weights, new.weights])
    assert np.array_equal(g_old.data, np.zeros_like(old.weights.data))
    assert np.abs(g_new.data).max() > 0


def test_cosine_margin_loss_rejects_foreign_label():
    bank = _bank_with_head([[1.0, 0.0], [0.0, 1.0]], class_ids=[0, 1])
    with pytest.raises(ContractError):
        cosine_margin_loss(Tensor([[1.0, 0.0]]), [5], bank, current_task=1)


def test_distillation_loss_zero_for_identical_models():
    model = build_model(3, 64, seed=4)
    snap = model.snapshot()
    loss = feature_distillation_loss(snap, model, _samples(3))
    assert loss.item() == 0.0


def test_distillation_loss_hand_value():
    old = lambda values: np.array([0.0, 0.0], dtype=np.float32)  # noqa: E731
    new = lambda values: np.array([1.0, 1.0], dtype=np.float32)  # noqa: E731
    loss = feature_distillation_loss(old, new, _samples(1))
    assert loss.item() == pytest.approx(2.0)


def test_distillation_loss_dim_mismatch():
    old = lambda values: np.zeros(3, dtype=np.float32)  # noqa: E731
    new = lambda values: np.zeros(4, dtype=np.float32)  # noqa: E731
    with pytest.raises(ContractError):
        feature_distillation_loss(old, new, _samples(1))


def test_distillation_loss_batch_order_invariant():
    model = build_model(3, 64, seed=4)
    samples = _samples(5)
    model.adapters[0].w_up.data[...] = 0.01  # make old != new
    snap = model.snapshot()
    model.adapters[0].w_up.data[...] = 0.02
    a = feature_distillation_loss(snap, model, samples).item()
    b = feature_distillation_loss(snap, model, samples[::-1]).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_unified_ce_uniform_is_ln_k():
    bank = _bank_with_head(np.eye(3), class_ids=[0, 1, 2])
    loss = unified_ce_loss(Tensor([[0.0, 0.0, 0.0]]), [1], bank)
    assert loss.item() == pytest.approx(math.log(3.0), abs=1e-6)


def test_unified_ce_saturated_is_zero():
    bank = _bank_with_head(np.eye(2), class_ids=[0, 1])
    loss = unified_ce_loss(Tensor([[1e6, 0.0]]), [0], bank)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_unified_ce_hand_value():
    bank = _bank_with_head(np.eye(2), class_ids=[0, 1])
    loss = unified_ce_loss(Tensor([[1.0, 0.0]]), [0], bank)
    assert loss.item() == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-6)


def test_unified_ce_rejects_unseen_label():
    bank = _bank_with_head(np.eye(2), class_ids=[0, 1])
    with pytest.raises(ContractError):
        unified_ce_loss(Tensor([[1.0, 0.0]]), [2], bank)


def test_unified_ce_reaches_every_head_not_adapters():
    bank = HeadBank()
    h1 = CosineHead(1, [0], 3, seed=1)
    h2 = CosineHead(2, [1], 3, seed=2)
    bank.append(h1)
    bank.append(h2)
    feats = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    loss = unified_ce_loss(feats, [0, 1, 0, 1], bank)
    g1, g2 = grad(loss, [h1.weights, h2.weights])
    assert np.abs(g1.data).max() > 0
    assert np.abs(g2.data).max() > 0


# ---------------------------------------------------------------- gradients vs FD

def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    dim = 8
    bank = HeadBank(margin=0.1, logit_scale=10.0)
    old_head = CosineHead(1, [0, 1], dim, seed=1)
    head = CosineHead(2, [2, 3], dim, seed=2)
    head.weights.data[...] = rng.uniform(-1, 1, (2, dim))
    old_head.weights.data[...] = rng.uniform(-1, 1, (2, dim))
    bank.append(old_head)
    bank.append(head)
    feats = Tensor(rng.uniform(-1, 1, (4, dim)), requires_grad=True)
    labels = [2, 3, 2, 3]

    def cos_loss():
        return cosine_margin_loss(feats, labels, bank, current_task=2)

    analytic = grad(cos_loss(), [head.weights, feats])
    numeric = fd_grad(cos_loss, [head.weights, feats])
    for a, n in zip(analytic, numeric):
        assert rel_err(a.data, n) < 1e-3

    old_feats = Tensor(rng.uniform(-1, 1, (4, dim)))

    def kd_loss():
        from protodrift.model import mean_squared_distance

        return mean_squared_distance(old_feats, feats)

    analytic = grad(kd_loss(), [feats])
    numeric = fd_grad(kd_loss, [feats])
    assert rel_err(analytic[0].data, numeric[0]) < 1e-3

    def ce_loss():
        return unified_ce_loss(feats.detach(), [0, 1, 2, 3], bank)

    params = [old_head.weights, head.weights]
    analytic = grad(ce_loss(), params)
    numeric = fd_grad(ce_loss, params)
    for a, n in zip(analytic, numeric):
        assert rel_err(a.data, n) < 1e-3


# ---------------------------------------------------------------- predict

def test_predict_single_class():
    model = build_model(3, 64, seed=6)
    model.bank.append(CosineHead(1, [4], model.embed_dim, seed=0))
    for sample in _samples(3):
        assert predict(model, sample) == 4


def test_predict_feature_matching_head_row():
    model = build_model(3, 64, seed=6)
    model.bank.append(CosineHead(1, [0, 1], model.embed_dim, seed=0))
    sample = _samples(1)[0]
    f = extract_features(model, sample).data
    model.bank.heads[0].weights.data[1, :] = f  # class 1's row equals the feature
    assert predict(model, sample) == 1


def test_classify_features_scale_invariant():
    bank = _bank_with_head(np.random.default_rng(3).normal(size=(4, 6)),
                           class_ids=[0, 1, 2, 3])
    feats = np.random.default_rng(4).normal(size=(10, 6)).astype(np.float32)
    base = classify_features(bank, feats)
    assert np.array_equal(base, classify_features(bank, 7.0 * feats))


def test_predict_batch_matches_predict():
    model = build_model(3, 64, seed=6)
    model.bank.append(CosineHead(1, [0, 1], model.embed_dim, seed=1))
    samples = _samples(4)
    batch = predict_batch(model, samples)
    singles = [predict(model, s) for s in samples]
    assert list(batch) == singles


def test_features_np_accepts_callable():
    samples = _samples(3)
    feats = features_np(lambda values: values[:, 0], samples)
    assert feats.shape == (3, 3)
    assert np.allclose(feats[0], samples[0].values[:, 0])
