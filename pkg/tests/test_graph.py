from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclave_slices.autodiff import Tensor
from enclave_slices.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    public_export,
    read_manifest,
    save_checkpoint,
    validate_index,
)
from enclave_slices.errors import ConfigError, ContractError, DimensionError, FormatError, InputError
from enclave_slices.graph import (
    ENCLAVE,
    UNTRUSTED,
    GraphSpec,
    LayerSpec,
    attach_slices,
    build_backbone,
    enable_linear_attention,
    forward_with_taps,
    predict,
)

ARCHS = ["mlp-s", "cnn-s", "vit-t"]


def kinds(g):
    return [layer.kind for layer in g.layers]


def test_cnn_s_layout():
    g = build_backbone("cnn-s")
    assert kinds(g).count("conv2d") == 6
    assert all(layer.placement == ENCLAVE for layer in g.layers if layer.kind == "relu")
    assert all(layer.placement == UNTRUSTED for layer in g.layers if layer.kind == "conv2d")
    assert g.classifier().placement == ENCLAVE


def test_mlp_s_layout():
    g = build_backbone("mlp-s")
    assert kinds(g) == ["linear", "relu"] * 3 + ["linear", "classifier"]


def test_vit_t_layout():
    g = build_backbone("vit-t")
    att = [layer for layer in g.layers if layer.kind == "attention"]
    assert len(att) == 2
    assert kinds(g).count("ffn") == 2
    assert all(layer.dims["d_model"] == 32 for layer in att)


def test_unknown_arch():
    with pytest.raises(ConfigError):
        build_backbone("resnet-1000")


def test_backbone_is_frozen_with_trainable_head():
    g = build_backbone("mlp-s")
    assert not any(t.requires_grad for t in g.backbone_tensors())
    assert all(t.requires_grad for t in g.classifier().weights.values())


def test_dense_policy_pairs_on_four_units():
    g = attach_slices(build_backbone("mlp-s"), "DENSE_CNN")
    assert sorted((s.source, s.target) for s in g.slices) == [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)]
    assert all(s.alpha.requires_grad for s in g.slices)


def test_lora_policy_count():
    g = attach_slices(build_backbone("vit-t"), "LORA_ALL")
    assert len(g.slices) == 4
    assert sorted({s.site for s in g.slices}) == ["q", "v"]
    assert all(s.rank == 4 and not s.alpha.requires_grad for s in g.slices)


def test_single_unit_backbone_has_no_slices():
    g = build_backbone("mlp-s")
    g.layers = [g.layers[0], g.classifier()]
    assert attach_slices(g, "DENSE_CNN").slices == []


def test_unknown_policy():
    with pytest.raises(ConfigError):
        attach_slices(build_backbone("mlp-s"), "EVERYTHING")


def test_attach_refuses_unfrozen_backbone():
    g = build_backbone("mlp-s")
    g.layers[0].weights["w"].requires_grad = True
    with pytest.raises(ContractError):
        attach_slices(g, "DENSE_CNN")


@pytest.mark.parametrize("arch", ["mlp-s", "cnn-s"])
def test_slice_size_rule(arch):
    g = attach_slices(build_backbone(arch), "DENSE_CNN")
    units = g.units()
    for s in g.slices:
        target = units[s.target - 1][0]
        assert s.param_count() <= math.ceil(target.param_count() / 18)


def _randomize_slices(g, seed):
    rng = np.random.default_rng(seed)
    for s in g.slices:
        for t in s.weights.values():
            t.data[...] = rng.normal(size=t.shape).astype(np.float32)


@pytest.mark.parametrize("arch,policy", [("mlp-s", "DENSE_CNN"), ("cnn-s", "DENSE_CNN"), ("vit-t", "LORA_ALL")])
def test_zero_alpha_equals_backbone(arch, policy):
    base = build_backbone(arch, seed=3)
    g = attach_slices(base, policy, seed=3)
    _randomize_slices(g, 0)
    for s in g.slices:
        s.alpha.data[:] = 0
    x = np.random.default_rng(1).normal(size=(16, 64)).astype(np.float32)
    np.testing.assert_array_equal(predict(g, x), predict(base, x))


@pytest.mark.parametrize("arch,policy", [("mlp-s", "DENSE_CNN"), ("cnn-s", "DENSE_CNN"), ("vit-t", "LORA_ALL")])
def test_removing_slice_equals_zero_alpha(arch, policy):
    g = attach_slices(build_backbone(arch, seed=4), policy, seed=4)
    _randomize_slices(g, 1)
    key = g.slices[1].key
    removed, zeroed = g.clone(), g.clone()
    removed.remove_slices([key])
    next(s for s in zeroed.slices if s.key == key).alpha.data[:] = 0
    x = np.random.default_rng(2).normal(size=(16, 64)).astype(np.float32)
    np.testing.assert_array_equal(predict(removed, x), predict(zeroed, x))


def _toy_identity_graph():
    """Two 2x2 identity linear units and an identity head, one slice from unit 1 into unit 2."""
    eye = np.eye(2, dtype=np.float32)
    mk = lambda i, kind, placement: LayerSpec(  # noqa: E731
        i, kind, {"c_in": 2, "c_out": 2, "bias": True} if kind == "linear" else {"c_in": 2, "n_classes": 2},
        placement, {"w": Tensor(eye.copy()), "b": Tensor(np.zeros(2, np.float32))},
    )
    g = GraphSpec("toy", "flat", 2, 2, [mk(0, "linear", UNTRUSTED), mk(1, "linear", UNTRUSTED), mk(2, "classifier", ENCLAVE)])
    return g


def test_identity_slice_shifts_logits_by_tap():
    g = _toy_identity_graph()
    dense = attach_slices(g, "DENSE_CNN")
    s = next(s for s in dense.slices if (s.source, s.target) == (1, 2))
    dense.slices = [s]
    s.weights["down"] = Tensor(np.eye(2, dtype=np.float32)[: s.rank])
    s.weights["up"] = Tensor(np.eye(2, dtype=np.float32)[:, : s.rank])
    assert s.rank == 1
    x = np.array([[1.0, 0.0], [3.0, 0.0]], np.float32)
    # unit-1 output is x itself and lies in the rank-1 slice's span, so logits move by alpha * x
    np.testing.assert_allclose(predict(dense, x) - predict(g, x), x)


def test_input_width_checked():
    with pytest.raises(DimensionError):
        forward_with_taps(build_backbone("mlp-s"), np.zeros((2, 10), np.float32))


def test_linear_attention_modes():
    g = build_backbone("vit-t")
    enable_linear_attention(g, "dynamic", beta_init=1.0)
    x = np.random.default_rng(0).normal(size=(4, 64)).astype(np.float32)
    # beta = 1 keeps pure softmax attention
    np.testing.assert_allclose(predict(g, x), predict(build_backbone("vit-t"), x), atol=1e-6)


# ---------------------------------------------------------------- checkpoints


def _random_graph(seed: int, arch: str, policy: str | None, role: str):
    g = build_backbone(arch, seed=seed)
    if policy:
        g = attach_slices(g, policy, seed=seed)
        _randomize_slices(g, seed)
    if arch == "vit-t" and seed % 2:
        enable_linear_attention(g, seed=seed)
    g.role = role
    g.meta = {"seed": seed}
    return g


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 1000),
    combo=st.sampled_from([("mlp-s", None), ("mlp-s", "DENSE_CNN"), ("cnn-s", "DENSE_CNN"), ("vit-t", "LORA_ALL"), ("vit-t", None)]),
    role=st.sampled_from(["VICTIM", "DENSE", "SPARSE"]),
)
def test_checkpoint_round_trip_bit_exact(seed, combo, role):
    g = _random_graph(seed, *combo, role)
    blob = encode_checkpoint(g)
    back = decode_checkpoint(blob)
    assert encode_checkpoint(back) == blob
    assert back.role == role and back.meta == g.meta
    for (n1, t1), (n2, t2) in zip(g.named_tensors(), back.named_tensors()):
        assert n1 == n2 and t1.requires_grad == t2.requires_grad
        assert t1.data.tobytes() == t2.data.tobytes()
    x = np.random.default_rng(seed).normal(size=(5, 64)).astype(np.float32)
    np.testing.assert_array_equal(predict(g, x), predict(back, x))


def test_index_tiles_data_section():
    blob = encode_checkpoint(_random_graph(1, "cnn-s", "DENSE_CNN", "DENSE"))
    manifest, base = read_manifest(blob)
    assert validate_index(manifest, len(blob) - base) == []
    last = manifest["tensor_index"][-1]
    assert base + last["offset"] + last["len"] == len(blob)


@pytest.mark.parametrize("pos", [0, 1, 2, 3, 4])
def test_corrupt_header_byte(pos):
    blob = bytearray(encode_checkpoint(build_backbone("mlp-s")))
    blob[pos] ^= 0xFF
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(blob))


def test_truncated_checkpoint():
    blob = encode_checkpoint(build_backbone("mlp-s"))
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-1])


def test_missing_checkpoint(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "nope.tsmd")


def test_save_load(tmp_path):
    g = _random_graph(2, "mlp-s", "DENSE_CNN", "DENSE")
    save_checkpoint(g, tmp_path / "m.tsmd")
    assert encode_checkpoint(load_checkpoint(tmp_path / "m.tsmd")) == encode_checkpoint(g)


def test_public_export_withholds_private_parts():
    g = _random_graph(3, "mlp-s", "DENSE_CNN", "SPARSE")
    out = public_export(g)
    assert out.slices == []
    for layer in out.layers:
        if layer.placement == ENCLAVE:
            assert not layer.weights
    private = g.classifier().weights["w"].data.tobytes()
    assert private not in encode_checkpoint(out)
