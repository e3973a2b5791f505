from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclave_slices.attack import (
    PartitionConfig,
    SweepPoint,
    evaluate_attack,
    init_surrogate,
    label_oracle,
    make_partition,
    read_reports,
    steal,
    sweep,
    sweet_spot,
    write_reports,
)
from enclave_slices.data import Dataset
from enclave_slices.errors import ConfigError
from enclave_slices.flops import percent_flops
from enclave_slices.graph import build_backbone
from enclave_slices.trainer import TrainConfig, with_fresh_head

import pipeline


def pair(arch="mlp-s"):
    public = with_fresh_head(build_backbone(arch, seed=1), 10, seed=1)
    victim = build_backbone(arch, seed=2)
    rng = np.random.default_rng(0)
    for g in (public, victim):
        # fresh backbones share all-zero biases; make every entry distinguishable
        for _, t in g.named_tensors():
            t.data += rng.normal(size=t.shape).astype(np.float32) * 0.01
    return public, victim


def tensors(g):
    return {n: t.data for n, t in g.named_tensors()}


def toy_data(n=120, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 64)).astype(np.float32), rng.integers(0, 10, size=n), 10)


def test_parse_and_label():
    assert PartitionConfig.parse("DEEP_K(2)") == PartitionConfig("DEEP_K", k=2)
    assert PartitionConfig.parse("MAGNITUDE_RATIO(0.01)").label == "MAGNITUDE_RATIO(0.01)"
    assert PartitionConfig.parse(" TEESLICE ").label == "TEESLICE"
    for bad in ("DEEP_K", "MAGNITUDE_RATIO(2)", "WHATEVER", "DEEP_K(x)"):
        with pytest.raises(ConfigError):
            PartitionConfig.parse(bad)


def test_k_beyond_depth():
    with pytest.raises(ConfigError):
        make_partition(build_backbone("mlp-s"), PartitionConfig("DEEP_K", k=6))


def test_endpoint_utilities():
    g = build_backbone("cnn-s")
    assert percent_flops(g, make_partition(g, PartitionConfig("BLACK_BOX"))).percent_tee == 1.0
    assert percent_flops(g, make_partition(g, PartitionConfig("NO_SHIELD"))).percent_tee == 0.0


def test_magnitude_ratio_hides_ceil_count_per_tensor():
    g = build_backbone("mlp-s")
    plan = make_partition(g, PartitionConfig("MAGNITUDE_RATIO", m=0.01))
    expected = sum(math.ceil(0.01 * t.data.size) for layer in g.layers for t in layer.weights.values())
    assert sum(int(mask.sum()) for mask in plan.hidden.values()) == expected
    for layer in g.layers:
        for name, t in layer.weights.items():
            mask = plan.hidden[f"layer{layer.id}.{name}"]
            if mask.any():
                assert np.abs(t.data[mask]).min() >= np.abs(t.data[~mask]).max()


def test_magnitude_ratio_extremes_collapse_to_endpoints():
    g = build_backbone("mlp-s")
    assert percent_flops(g, make_partition(g, PartitionConfig("MAGNITUDE_RATIO", m=0.0))).percent_tee == 0.0
    assert percent_flops(g, make_partition(g, PartitionConfig("MAGNITUDE_RATIO", m=1.0))).percent_tee == 1.0


def test_deep_and_shallow_k_pick_opposite_ends():
    g = build_backbone("mlp-s")
    deep = make_partition(g, PartitionConfig("DEEP_K", k=1))
    shallow = make_partition(g, PartitionConfig("SHALLOW_K", k=1))
    assert deep.placement[g.classifier().id] == "ENCLAVE"
    assert shallow.placement[g.layers[0].id] == "ENCLAVE"
    assert shallow.placement[g.classifier().id] == "UNTRUSTED"


def test_no_shield_init_copies_victim():
    public, victim = pair()
    sur = init_surrogate(public, make_partition(victim, PartitionConfig("NO_SHIELD")), victim)
    for (n, a), b in zip(tensors(victim).items(), tensors(sur).values()):
        assert np.array_equal(a, b), n


def test_black_box_init_is_public_model():
    public, victim = pair()
    sur = init_surrogate(public, make_partition(victim, PartitionConfig("BLACK_BOX")), victim)
    for a, b in zip(tensors(public).values(), tensors(sur).values()):
        assert np.array_equal(a, b)
    assert all(t.requires_grad for t in sur.trainable())


@pytest.mark.parametrize("arch", ["mlp-s", "vit-t"])
def test_teeslice_init_never_sees_private_weights(arch):
    public = with_fresh_head(build_backbone(arch, seed=1), 10, seed=1)
    # the deployed hybrid: public backbone, private head and slices
    from enclave_slices.graph import attach_slices

    hybrid = attach_slices(with_fresh_head(build_backbone(arch, seed=1), 10, seed=3), "LORA_ALL" if arch == "vit-t" else "DENSE_CNN")
    hybrid.classifier().weights["w"].data[...] = 7.0
    sur = init_surrogate(public, make_partition(hybrid, PartitionConfig("TEESLICE")), hybrid)
    assert sur.slices == []
    for a, b in zip(tensors(public).values(), tensors(sur).values()):
        assert a.tobytes() == b.tobytes()


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([0.01, 0.1, 0.25, 0.5, 0.9]))
def test_magnitude_ratio_exposed_fraction(m):
    public, victim = pair()
    sur = init_surrogate(public, make_partition(victim, PartitionConfig("MAGNITUDE_RATIO", m=m)), victim)
    for layer, vl in zip(sur.layers, victim.layers):
        for name, t in layer.weights.items():
            size = t.data.size
            same = int((t.data == vl.weights[name].data).sum())
            assert same == size - math.ceil(m * size)


def test_incompatible_public_model():
    public = with_fresh_head(build_backbone("mlp-s", seed=1), 5)
    with pytest.raises(ConfigError):
        init_surrogate(public, make_partition(build_backbone("mlp-s"), PartitionConfig("BLACK_BOX")), build_backbone("mlp-s"))


def test_zero_epochs_returns_init():
    public, victim = pair()
    m_init = init_surrogate(public, make_partition(victim, PartitionConfig("BLACK_BOX")), victim)
    sur = steal(label_oracle(victim), m_init, toy_data().x, TrainConfig(epochs=0))
    for a, b in zip(tensors(m_init).values(), tensors(sur).values()):
        assert np.array_equal(a, b)


def test_query_budget_enforced():
    public, victim = pair()
    m_init = init_surrogate(public, make_partition(victim, PartitionConfig("BLACK_BOX")), victim)
    with pytest.raises(ConfigError):
        steal(label_oracle(victim), m_init, toy_data(50).x, TrainConfig(epochs=1), budget=49)


def test_identical_seeds_identical_reports():
    public, victim = pair()
    data = toy_data()
    configs = [PartitionConfig.parse(c) for c in ("NO_SHIELD", "BLACK_BOX", "DEEP_K(2)")]
    runs = [sweep(victim, public, configs, data.x[:60], data, TrainConfig(epochs=2, lr=0.003)) for _ in range(2)]
    assert [p.report for p in runs[0].points] == [p.report for p in runs[1].points]
    no_shield = runs[0].point("NO_SHIELD").report
    assert no_shield.direct_copy and no_shield.query_count == 0 and no_shield.fidelity == 1.0


def test_fidelity_of_victim_copy():
    _, victim = pair()
    data = toy_data()
    rep = evaluate_attack(victim.clone(), label_oracle(victim)(data.x), data)
    assert rep.fidelity == 1.0


def test_constant_surrogate_is_chance_level():
    _, victim = pair()
    evalset = pipeline.digits(0)["attack_eval"]
    const = victim.clone()
    head = const.classifier()
    head.weights["w"].data[...] = 0
    head.weights["b"].data[...] = np.arange(10, dtype=np.float32)
    rep = evaluate_attack(const, label_oracle(victim)(evalset.x), evalset)
    assert rep.accuracy == pytest.approx(0.1, abs=0.04)


def test_sweet_spot_rules():
    def pt(cfg, sec, util):
        return SweepPoint(cfg, sec, util, None)

    only_black = [pt("BLACK_BOX", 0.4, 1.0)]
    assert sweet_spot(only_black, 0.4, 0.03) == "BLACK_BOX"
    pts = [pt("NO_SHIELD", 0.9, 0.0), pt("BLACK_BOX", 0.4, 1.0), pt("TEESLICE", 0.41, 0.05)]
    assert sweet_spot(pts, 0.4, 0.03) == "TEESLICE"
    assert sweet_spot(pts, 0.4, math.inf) == "NO_SHIELD"


def test_sweep_with_only_black_box():
    public, victim = pair()
    data = toy_data()
    curve = sweep(victim, public, [PartitionConfig("BLACK_BOX")], data.x[:40], data, TrainConfig(epochs=1))
    assert curve.sweet_spot == "BLACK_BOX" and curve.points[0].utility == 1.0


def test_sweep_needs_black_box():
    public, victim = pair()
    data = toy_data()
    with pytest.raises(ConfigError):
        sweep(victim, public, [PartitionConfig("NO_SHIELD")], data.x[:10], data, TrainConfig(epochs=1))


def test_reports_round_trip(tmp_path):
    public, victim = pair()
    data = toy_data()
    configs = [PartitionConfig.parse(c) for c in ("NO_SHIELD", "BLACK_BOX")]
    curve = sweep(victim, public, configs, data.x[:30], data, TrainConfig(epochs=1))
    write_reports(curve, tmp_path / "r.jsonl", tmp_path / "m.csv")
    assert read_reports(tmp_path / "r.jsonl") == [p.report for p in curve.points]
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "config,accuracy,fidelity,percent_tee"


@pytest.mark.slow
def test_seeded_endpoint_ordering():
    curve = pipeline.mlp_sweep(0)
    assert curve.point("NO_SHIELD").security >= curve.point("BLACK_BOX").security
