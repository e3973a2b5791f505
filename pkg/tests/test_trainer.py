from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclave_slices.autodiff import Tensor
from enclave_slices.data import Dataset, make_blobs
from enclave_slices.errors import ContractError, InputError
from enclave_slices.graph import accuracy, attach_slices, build_backbone, enable_linear_attention, predict
from enclave_slices.trainer import (
    AccuracyBudget,
    PruneConfig,
    TrainConfig,
    alpha_importance,
    betas,
    fit,
    iterative_prune,
    lora_magnitude,
    magnitude_prune_lora,
    select_smallest,
    train_dense,
    train_dynamic_attention,
    write_round_log,
)

import pipeline


def backbone_bytes(g):
    return [t.data.tobytes() for t in g.backbone_tensors()]


def blobs_dense(seed=0, n=200):
    data = make_blobs(seed, n=n)
    g = attach_slices(build_backbone("mlp-s", in_features=2, n_classes=2, seed=seed), "DENSE_CNN", seed=seed)
    return g, data


def test_no_steps_leaves_weights_unchanged():
    g, data = blobs_dense()
    before = [t.data.copy() for _, t in g.named_tensors()]
    train_dense(g, data, TrainConfig(epochs=0), lambda_complexity=0.0)
    assert all(np.array_equal(a, t.data) for a, (_, t) in zip(before, g.named_tensors()))


def test_separable_toy_reaches_high_train_accuracy():
    g, data = blobs_dense()
    before = backbone_bytes(g)
    train_dense(g, data, TrainConfig(epochs=50, lr=0.01))
    assert accuracy(g, data.x, data.y) >= 0.95
    assert backbone_bytes(g) == before


def test_huge_lambda_drives_alphas_below_setup_threshold():
    g, data = blobs_dense()
    train_dense(g, data, TrainConfig(epochs=50, lr=0.01), lambda_complexity=1e6)
    assert all(alpha_importance(s) < PruneConfig().alpha_setup for s in g.slices)


def test_dense_training_rejects_unfrozen_backbone():
    g, data = blobs_dense()
    g.layers[0].weights["w"].requires_grad = True
    with pytest.raises(ContractError):
        train_dense(g, data, TrainConfig(epochs=1))


def test_empty_dataset():
    g, _ = blobs_dense()
    with pytest.raises(InputError):
        train_dense(g, Dataset(np.zeros((0, 2), np.float32), np.zeros(0, np.int64), 2), TrainConfig(epochs=1))


def test_budget_tolerance():
    assert AccuracyBudget(0.9, 0.01).acc_tol == pytest.approx(0.891)


def test_delta_range():
    with pytest.raises(ContractError):
        PruneConfig(delta=1.0)


# ---------------------------------------------------------------- iterative pruning


def trained_blobs_dense():
    g, data = blobs_dense(seed=1)
    train_dense(g, data, TrainConfig(epochs=10, lr=0.01))
    return g, data


def test_unreachable_tolerance_prunes_nothing_beyond_setup():
    g, data = trained_blobs_dense()
    for s in g.slices[:2]:
        s.alpha.data[:] = 0.01  # below the setup threshold
    res = iterative_prune(g, data, data, AccuracyBudget(1.0, 0.0), PruneConfig(delta=0.0, rounds=3), TrainConfig(lr=0.01))
    assert res.status == "below_tolerance"
    assert len(res.model.slices) == len(g.slices) - 2
    assert all(r.pruned == [] for r in res.history)


def test_large_n_prunes_everything_in_one_round():
    g, data = trained_blobs_dense()
    for s in g.slices:
        s.alpha.data[:] = 1.0
    res = iterative_prune(g, data, data, AccuracyBudget(0.0, 0.0), PruneConfig(n=99, rounds=2), TrainConfig(lr=0.01))
    assert res.history[0].live_slices == 5 and len(res.history[0].pruned) == 5
    # the last stored model is the one saved in the final passing round: no slices, head only
    assert res.model.slices == []
    assert res.status == "ok"


def test_pruning_is_deterministic_and_ties_break_by_key():
    g, data = trained_blobs_dense()
    for s in g.slices:
        s.alpha.data[:] = 0.5
    assert select_smallest(g, 2, alpha_importance) == [(1, 2, ""), (1, 3, "")]
    runs = [
        iterative_prune(g, data, data, AccuracyBudget(0.5, 0.0), PruneConfig(rounds=3), TrainConfig(lr=0.01))
        for _ in range(2)
    ]
    assert [r.pruned for r in runs[0].history] == [r.pruned for r in runs[1].history]


def test_round_log(tmp_path):
    g, data = trained_blobs_dense()
    path = tmp_path / "log.csv"
    res = iterative_prune(g, data, data, AccuracyBudget(0.5, 0.0), PruneConfig(rounds=3), TrainConfig(lr=0.01), log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,live_slices,acc,loss,sum_alpha_or_mag"
    assert len(lines) == 1 + len(res.history)
    write_round_log(res.history, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_text() == path.read_text()


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 500), n=st.integers(1, 3), tol=st.floats(0.0, 1.0))
def test_prune_monotone_and_backbone_immutable(seed, n, tol):
    g, data = blobs_dense(seed=seed, n=80)
    before = backbone_bytes(g)
    res = iterative_prune(g, data, data, AccuracyBudget(tol, 0.0), PruneConfig(n=n, rounds=4, retrain_epochs=1), TrainConfig(lr=0.01))
    live = [r.live_slices for r in res.history]
    assert all(a >= b for a, b in zip(live, live[1:]))
    for r in res.history:
        # a round prunes only after its accuracy test passed
        assert (r.pruned != []) == (r.acc > tol and r.live_slices > 0)
    if res.status == "ok":
        assert res.acc > tol
    assert backbone_bytes(res.model) == before
    assert backbone_bytes(g) == before


# ---------------------------------------------------------------- LoRA magnitude


def _adapter():
    g = attach_slices(build_backbone("vit-t"), "LORA_ALL")
    return g, g.slices[0]


def test_magnitude_zero():
    _, s = _adapter()
    for t in s.weights.values():
        t.data[...] = 0
    assert lora_magnitude(s) == 0


def test_magnitude_direct_sum():
    _, s = _adapter()
    s.weights = {"down": Tensor(np.array([[1.0, -2.0]], np.float32)), "up": Tensor(np.array([[3.0]], np.float32))}
    assert lora_magnitude(s) == 6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16))
def test_magnitude_homogeneous(seed):
    _, s = _adapter()
    rng = np.random.default_rng(seed)
    for t in s.weights.values():
        t.data[...] = rng.normal(size=t.shape)
    m = lora_magnitude(s)
    for t in s.weights.values():
        t.data *= 2
    assert lora_magnitude(s) == pytest.approx(2 * m, rel=1e-12)


def _lora_graph():
    d = pipeline.digits(0)
    small = Dataset(d["train"].x[:200], d["train"].y[:200], 10)
    g = attach_slices(build_backbone("vit-t", seed=0), "LORA_ALL", seed=0)
    rng = np.random.default_rng(0)
    for s in g.slices:
        s.weights["up"].data[...] = rng.normal(size=s.weights["up"].shape) * 0.1
    return g, small


def test_zeroed_adapter_pruned_first():
    g, data = _lora_graph()
    target = g.slices[2]
    for t in target.weights.values():
        t.data[...] = 0
    res = magnitude_prune_lora(g, data, data, AccuracyBudget(0.0, 0.0), PruneConfig(rounds=1, retrain_epochs=1), TrainConfig(lr=0.003))
    assert res.history[0].pruned == [list(target.key)]


def test_lora_nothing_pruned_below_tolerance():
    g, data = _lora_graph()
    res = magnitude_prune_lora(g, data, data, AccuracyBudget(1.0, 0.0), PruneConfig(delta=0.0, rounds=2, retrain_epochs=1), TrainConfig(lr=0.003))
    assert res.status == "below_tolerance"
    assert len(res.model.slices) == 4


# ---------------------------------------------------------------- dynamic attention


def _vit_data():
    d = pipeline.digits(0)
    return Dataset(d["train"].x[:300], d["train"].y[:300], 10), Dataset(d["eval"].x[:200], d["eval"].y[:200], 10)


def test_beta_one_frozen_matches_standard_training():
    train, evalset = _vit_data()
    base = build_backbone("vit-t", seed=5)
    cfg = TrainConfig(epochs=2, lr=0.003)
    g, state = train_dynamic_attention(base, train, evalset, cfg, reg_weight=0.0, beta_init=1.0, train_beta=False)
    ref = base.clone()
    fit(ref, train, cfg, stream="dynamic-attention")
    assert set(state.substituted.values()) == {"standard"}
    np.testing.assert_allclose(g.classifier().weights["w"].data, ref.classifier().weights["w"].data, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(predict(g, evalset.x), predict(ref, evalset.x), rtol=1e-5, atol=1e-6)


def test_beta_zero_frozen_is_linear_attention_training():
    train, evalset = _vit_data()
    base = build_backbone("vit-t", seed=6)
    cfg = TrainConfig(epochs=2, lr=0.003)
    g, state = train_dynamic_attention(base, train, evalset, cfg, reg_weight=0.0, beta_init=0.0, train_beta=False, seed=2)
    ref = base.clone()
    enable_linear_attention(ref, "linear", seed=2)
    fit(ref, train, cfg, stream="dynamic-attention")
    assert set(state.substituted.values()) == {"linear"}
    assert state.beta_final == state.beta_init
    np.testing.assert_allclose(predict(g, evalset.x), predict(ref, evalset.x), rtol=1e-5, atol=1e-6)


def test_dynamic_attention_leaves_input_graph_untouched():
    train, evalset = _vit_data()
    base = build_backbone("vit-t", seed=7)
    _, state = train_dynamic_attention(base, train, evalset, TrainConfig(epochs=1, lr=0.003))
    assert all("beta" not in layer.extras for layer in base.layers)
    assert sum(state.beta_final.values()) < sum(state.beta_init.values())
    assert betas(base) == {}


# ---------------------------------------------------------------- seeded reference runs


@pytest.mark.slow
def test_seeded_mlp_prune_contract():
    dense, res = pipeline.mlp_prune(0)
    assert res.status == "ok"
    assert res.acc >= (1 - pipeline.DELTA) * pipeline.victim_run("mlp-s", 0)[2]
    assert len(res.model.slices) < len(dense.slices)


@pytest.mark.slow
def test_seeded_vit_lora_prune_contract():
    dense, res = pipeline.vit_lora_prune(0)
    assert len(res.model.slices) <= len(dense.slices) / 2
    assert res.acc >= (1 - pipeline.DELTA) * pipeline.victim_run("vit-t", 0)[2]
