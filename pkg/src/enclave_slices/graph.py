"""Model description: backbone layers, tap-connected slices, LoRA adapters.

Layers are grouped into *units*: each weighted layer (linear, conv, attention,
FFN, classifier) starts a unit and absorbs the ReLU / BatchNorm layers that
follow it.  Units are numbered from 1; unit 0 is the network input.  A slice
``(p, i)`` reads the output of unit ``p`` and adds ``alpha * slice(out_p)`` to
the input of unit ``i``.  A LoRA adapter ``(p, p + 1, site)`` instead adds its
output to the ``site`` projection (``q`` or ``v``) inside attention unit ``p``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_rng
from .errors import ConfigError, ContractError, DimensionError

ENCLAVE = "ENCLAVE"
UNTRUSTED = "UNTRUSTED"

WEIGHTED = ("linear", "conv2d", "attention", "ffn", "classifier")
ROLES = ("VICTIM", "BACKBONE", "DENSE", "SPARSE", "SURROGATE", "PUBLIC")

SLICE_BUDGET_FACTOR = 18
LORA_RANK = 4


@dataclass
class LayerSpec:
    id: int
    kind: str
    dims: dict
    placement: str
    weights: dict[str, Tensor] = field(default_factory=dict)
    # private tensors trained on top of a public layer (linear-attention weights, beta)
    extras: dict[str, Tensor] = field(default_factory=dict)

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED

    def param_count(self) -> int:
        return sum(t.data.size for name, t in self.weights.items() if name not in ("mean", "var"))


@dataclass
class SliceAdapter:
    source: int
    target: int
    kind: str  # "lowrank" | "conv1x1" | "lora"
    d_in: int
    rank: int
    d_out: int
    alpha: Tensor
    weights: dict[str, Tensor]
    site: str = ""

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.source, self.target, self.site)

    @property
    def name(self) -> str:
        return f"slice{self.source}_{self.target}{self.site}"

    def param_count(self) -> int:
        return sum(t.data.size for t in self.weights.values())

    def apply(self, x: Tensor) -> Tensor:
        down, up = self.weights["down"], self.weights["up"]
        if self.kind == "conv1x1":
            return ad.conv2d(ad.conv2d(x, down), up)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.name}: input width {x.shape[-1]} != {self.d_in}")
        return ad.matmul(ad.matmul(x, ad.transpose(down)), ad.transpose(up))


@dataclass
class GraphSpec:
    arch: str
    input_kind: str  # "flat" | "image" | "row_tokens"
    in_features: int
    n_classes: int
    layers: list[LayerSpec]
    slices: list[SliceAdapter] = field(default_factory=list)
    role: str = "BACKBONE"
    meta: dict = field(default_factory=dict)

    def clone(self) -> "GraphSpec":
        return copy.deepcopy(self)

    def units(self) -> list[list[LayerSpec]]:
        out: list[list[LayerSpec]] = []
        for layer in self.layers:
            if layer.weighted or not out:
                out.append([layer])
            else:
                out[-1].append(layer)
        return out

    def unit_of(self) -> dict[int, int]:
        return {layer.id: u for u, group in enumerate(self.units(), 1) for layer in group}

    def backbone_units(self) -> list[int]:
        return [u for u, group in enumerate(self.units(), 1) if group[0].kind != "classifier"]

    def layer(self, layer_id: int) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def classifier(self) -> LayerSpec:
        return next(layer for layer in self.layers if layer.kind == "classifier")

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.layers:
            for name, t in layer.weights.items():
                yield f"layer{layer.id}.{name}", t
            for name, t in layer.extras.items():
                yield f"layer{layer.id}.extra.{name}", t
        for s in self.slices:
            for name, t in s.weights.items():
                yield f"{s.name}.{name}", t

    def backbone_tensors(self) -> list[Tensor]:
        return [t for layer in self.layers if layer.kind != "classifier" for t in layer.weights.values()]

    def trainable(self) -> list[Tensor]:
        params = [t for _, t in self.named_tensors() if t.requires_grad]
        params += [s.alpha for s in self.slices if s.alpha.requires_grad]
        return params

    def set_frozen(self, frozen: bool, include_head: bool = False) -> None:
        for layer in self.layers:
            if layer.kind == "classifier" and not include_head:
                continue
            for name, t in layer.weights.items():
                t.requires_grad = not frozen and name not in ("mean", "var")

    def remove_slices(self, keys) -> None:
        keys = set(keys)
        self.slices = [s for s in self.slices if s.key not in keys]


# ---------------------------------------------------------------- construction


def _he(rng, shape, fan_in) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32))


def _linear(lid, c_in, c_out, rng, placement=UNTRUSTED, kind="linear") -> LayerSpec:
    dims = {"c_in": c_in, "c_out": c_out, "bias": True} if kind == "linear" else {"c_in": c_in, "n_classes": c_out}
    return LayerSpec(
        lid, kind, dims, placement,
        {"w": _he(rng, (c_out, c_in), c_in), "b": Tensor(np.zeros(c_out, np.float32))},
    )


def fresh_classifier(lid: int, c_in: int, n_classes: int, rng) -> LayerSpec:
    layer = _linear(lid, c_in, n_classes, rng, ENCLAVE, kind="classifier")
    layer.weights["w"].data *= np.float32(0.5)
    for t in layer.weights.values():
        t.requires_grad = True
    return layer


def _conv(lid, c_in, c_out, rng) -> LayerSpec:
    return LayerSpec(
        lid, "conv2d", {"c_in": c_in, "c_out": c_out, "k": 3, "stride": 1, "pad": 1}, UNTRUSTED,
        {"w": _he(rng, (c_out, c_in, 3, 3), c_in * 9), "b": Tensor(np.zeros(c_out, np.float32))},
    )


def _relu(lid, c) -> LayerSpec:
    return LayerSpec(lid, "relu", {"c": c}, ENCLAVE)


def _attention(lid, d, heads, rng) -> LayerSpec:
    std = 1.0 / math.sqrt(d)
    w = {n: Tensor(rng.normal(0, std, (d, d)).astype(np.float32)) for n in ("wq", "wk", "wv", "wo")}
    return LayerSpec(lid, "attention", {"d_model": d, "n_heads": heads, "mode": "standard"}, UNTRUSTED, w)


def _ffn(lid, d, dh, rng) -> LayerSpec:
    return LayerSpec(
        lid, "ffn", {"d_model": d, "d_hidden": dh}, UNTRUSTED,
        {
            "w1": _he(rng, (dh, d), d),
            "b1": Tensor(np.zeros(dh, np.float32)),
            "w2": Tensor(rng.normal(0, 1.0 / math.sqrt(dh), (d, dh)).astype(np.float32)),
            "b2": Tensor(np.zeros(d, np.float32)),
        },
    )


# arch name -> human summary; the builders below are the source of truth
REGISTRY = {
    "mlp-s": "4 x Linear(width 64) with ReLU between, then Classifier(64, n_classes)",
    "cnn-s": "6 x Conv3x3 (1->8->8->16->16->32->32, stride 1, pad 1) each + ReLU, then GAP Classifier",
    "vit-t": "8 row tokens (+one-hot position) -> Linear(16, 32), 2 x [Attention(32, 2 heads) + FFN(32, 64)], mean-pool Classifier",
}


def build_backbone(arch: str, in_features: int = 64, n_classes: int = 10, seed: int = 0) -> GraphSpec:
    """Construct a registered desk architecture with frozen, seeded weights.

    The classifier head is created too (trainable, placed ENCLAVE); every other
    weight is frozen.
    """
    rng = make_rng(seed, "backbone", arch)
    layers: list[LayerSpec] = []
    if arch == "mlp-s":
        width = 64
        c = in_features
        for j in range(4):
            layers.append(_linear(len(layers), c, width, rng))
            c = width
            if j < 3:
                layers.append(_relu(len(layers), width))
        layers.append(fresh_classifier(len(layers), width, n_classes, rng))
        input_kind = "flat"
    elif arch == "cnn-s":
        if in_features != 64:
            raise ConfigError("cnn-s expects 8x8 single-channel inputs (64 features)")
        chans = [1, 8, 8, 16, 16, 32, 32]
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers.append(_conv(len(layers), c_in, c_out, rng))
            layers.append(_relu(len(layers), c_out))
        layers.append(fresh_classifier(len(layers), chans[-1], n_classes, rng))
        input_kind = "image"
    elif arch == "vit-t":
        if in_features != 64:
            raise ConfigError("vit-t expects 8x8 inputs (64 features)")
        d = 32
        layers.append(_linear(0, 16, d, rng))
        for _ in range(2):
            layers.append(_attention(len(layers), d, 2, rng))
            layers.append(_ffn(len(layers), d, 2 * d, rng))
        layers.append(fresh_classifier(len(layers), d, n_classes, rng))
        input_kind = "row_tokens"
    else:
        raise ConfigError(f"unknown architecture {arch!r}; registered: {sorted(REGISTRY)}")
    g = GraphSpec(arch, input_kind, in_features, n_classes, layers, role="BACKBONE")
    g.set_frozen(True)
    return g


def slice_rank(target: LayerSpec, d_in: int, d_out: int) -> int:
    budget = math.ceil(target.param_count() / SLICE_BUDGET_FACTOR)
    return max(1, budget // (d_in + d_out))


def _unit_width(group: list[LayerSpec], which: str) -> int:
    head = group[0]
    d = head.dims
    if head.kind == "conv2d":
        return d["c_in"] if which == "in" else d["c_out"]
    if head.kind in ("linear", "classifier"):
        return d["c_in"] if which == "in" else d.get("c_out", d.get("n_classes"))
    return d["d_model"]


def attach_slices(backbone: GraphSpec, policy: str, alpha_init: float = 1.0, seed: int = 0) -> GraphSpec:
    """Return a copy of ``backbone`` with the adapters a policy prescribes.

    ``DENSE_CNN`` connects every pair of backbone units at distance 1 or 2;
    ``LORA_ALL`` adds a rank-4 pair beside each attention ``W_q`` and ``W_v``.
    """
    for layer in backbone.layers:
        if layer.kind != "classifier" and any(t.requires_grad for t in layer.weights.values()):
            raise ContractError(f"backbone layer {layer.id} is not frozen")
    g = backbone.clone()
    g.role = "DENSE"
    rng = make_rng(seed, "slices", policy)
    units = g.units()
    slices: list[SliceAdapter] = []
    if policy == "DENSE_CNN":
        bb = g.backbone_units()
        for p in bb:
            for i in (p + 1, p + 2):
                if i not in bb:
                    continue
                src, tgt = units[p - 1], units[i - 1]
                d_in, d_out = _unit_width(src, "out"), _unit_width(tgt, "in")
                r = slice_rank(tgt[0], d_in, d_out)
                kind = "conv1x1" if tgt[0].kind == "conv2d" else "lowrank"
                if kind == "conv1x1":
                    down = rng.normal(0, math.sqrt(1.0 / d_in), (r, d_in, 1, 1))
                    up = np.zeros((d_out, r, 1, 1))
                else:
                    down = rng.normal(0, math.sqrt(1.0 / d_in), (r, d_in))
                    up = np.zeros((d_out, r))
                slices.append(_adapter(p, i, kind, d_in, r, d_out, down, up, alpha_init, True))
    elif policy == "LORA_ALL":
        for u, group in enumerate(units, 1):
            if group[0].kind != "attention":
                continue
            d = group[0].dims["d_model"]
            for site in ("q", "v"):
                down = rng.normal(0, math.sqrt(1.0 / d), (LORA_RANK, d))
                up = np.zeros((d, LORA_RANK))
                slices.append(_adapter(u, u + 1, "lora", d, LORA_RANK, d, down, up, 1.0, False, site))
    else:
        raise ConfigError(f"unknown slice policy {policy!r}")
    g.slices = slices
    return g


def _adapter(p, i, kind, d_in, r, d_out, down, up, alpha, alpha_trainable, site="") -> SliceAdapter:
    return SliceAdapter(
        p, i, kind, d_in, r, d_out,
        alpha=Tensor(np.array([alpha], np.float32), requires_grad=alpha_trainable),
        weights={
            "down": Tensor(down.astype(np.float32), requires_grad=True),
            "up": Tensor(up.astype(np.float32), requires_grad=True),
        },
        site=site,
    )


def enable_linear_attention(g: GraphSpec, mode: str = "dynamic", seed: int = 0, beta_init: float = 1.0) -> None:
    """Give every attention layer trainable linear-attention weights and a beta gate."""
    rng = make_rng(seed, "linear-attention")
    for layer in g.layers:
        if layer.kind != "attention":
            continue
        d = layer.dims["d_model"]
        layer.dims["mode"] = mode
        layer.extras = {
            "la_score": Tensor(rng.normal(0, 1.0 / math.sqrt(2 * d), (d, 2 * d)).astype(np.float32), requires_grad=True),
            "la_out": Tensor(rng.normal(0, 1.0 / math.sqrt(2 * d), (d, 2 * d)).astype(np.float32), requires_grad=True),
            "beta": Tensor(np.array([beta_init], np.float32), requires_grad=(mode == "dynamic")),
        }


# ---------------------------------------------------------------- forward


class Hooks:
    """Executes the linear pieces of each layer.  Deployment swaps this out to
    intercept offloadable products; ``name`` is the weight name in the layer."""

    def linear(self, layer: LayerSpec, name: str, x: Tensor) -> Tensor:
        return ad.matmul(x, ad.transpose(layer.weights[name]))

    def conv(self, layer: LayerSpec, x: Tensor) -> Tensor:
        return ad.conv2d(x, layer.weights["w"], None, layer.dims["stride"], layer.dims["pad"])


DEFAULT_HOOKS = Hooks()


def prepare_input(g: GraphSpec, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim != 2 or x.shape[1] != g.in_features:
        raise DimensionError(f"{g.arch}: expected (N, {g.in_features}) input, got {x.shape}")
    n = x.shape[0]
    if g.input_kind == "image":
        return ad.reshape(x, (n, 1, 8, 8))
    if g.input_kind == "row_tokens":
        pos = np.broadcast_to(np.eye(8, dtype=x.data.dtype), (n, 8, 8))
        return ad.concat([ad.reshape(x, (n, 8, 8)), Tensor(np.ascontiguousarray(pos), dtype=x.data.dtype)], axis=-1)
    return x


def _attention_layer(layer: LayerSpec, h: Tensor, hooks: Hooks, lora: dict[str, list[SliceAdapter]]) -> Tensor:
    proj = {}
    for site in ("q", "k", "v"):
        y = hooks.linear(layer, "w" + site, h)
        for s in lora.get(site, ()):
            y = ad.add(y, ad.scale(s.apply(h), s.alpha))
        proj[site] = y
    mode = layer.dims.get("mode", "standard")
    heads = layer.dims["n_heads"]
    if mode == "standard":
        core = ad.attention(proj["q"], proj["k"], proj["v"], heads)
    else:
        lin = ad.linear_attention(proj["q"], proj["k"], proj["v"], layer.extras["la_score"], layer.extras["la_out"])
        if mode == "linear":
            core = lin
        else:
            beta = layer.extras["beta"]
            std = ad.attention(proj["q"], proj["k"], proj["v"], heads)
            one = Tensor(np.ones(1, beta.data.dtype))
            core = ad.add(ad.scale(std, beta), ad.scale(lin, ad.sub(one, beta)))
    return ad.add(h, hooks.linear(layer, "wo", core))


def apply_layer(layer: LayerSpec, h: Tensor, hooks: Hooks = DEFAULT_HOOKS, lora=None) -> Tensor:
    w = layer.weights
    if layer.kind == "linear":
        return ad.add(hooks.linear(layer, "w", h), w["b"])
    if layer.kind == "conv2d":
        return ad.channel_bias(hooks.conv(layer, h), w["b"])
    if layer.kind == "relu":
        return ad.relu(h)
    if layer.kind == "batchnorm":
        return ad.batchnorm(h, w["gamma"], w["beta"], w["mean"].data, w["var"].data)
    if layer.kind == "attention":
        return _attention_layer(layer, h, hooks, lora or {})
    if layer.kind == "ffn":
        z = ad.relu(ad.add(hooks.linear(layer, "w1", h), w["b1"]))
        return ad.add(h, ad.add(hooks.linear(layer, "w2", z), w["b2"]))
    if layer.kind == "classifier":
        if h.ndim == 4:
            h = ad.mean(h, axis=(2, 3))
        elif h.ndim == 3:
            h = ad.mean(h, axis=1)
        return ad.add(hooks.linear(layer, "w", h), w["b"])
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def forward_with_taps(g: GraphSpec, x, hooks: Hooks = DEFAULT_HOOKS) -> Tensor:
    """Hybrid forward: backbone units plus every live slice, returning logits."""
    h = prepare_input(g, x)
    taps: dict[int, list[SliceAdapter]] = {}
    lora: dict[int, dict[str, list[SliceAdapter]]] = {}
    for s in sorted(g.slices, key=lambda s: s.key):
        if s.kind == "lora":
            lora.setdefault(s.source, {}).setdefault(s.site, []).append(s)
        else:
            taps.setdefault(s.target, []).append(s)
    outs = {0: h}
    for u, group in enumerate(g.units(), 1):
        for s in taps.get(u, ()):
            contrib = ad.scale(s.apply(outs[s.source]), s.alpha)
            if contrib.shape != h.shape:
                raise DimensionError(f"{s.name}: output {contrib.shape} vs unit input {h.shape}")
            h = ad.add(h, contrib)
        for layer in group:
            h = apply_layer(layer, h, hooks, lora.get(u))
        outs[u] = h
    return h


def predict(g: GraphSpec, x, batch_size: int = 512) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward_with_taps(g, x[i : i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, g.n_classes), np.float32)


def accuracy(g: GraphSpec, x, y) -> float:
    if len(y) == 0:
        return 0.0
    return float((predict(g, x).argmax(axis=1) == np.asarray(y)).mean())


def layer_shapes(g: GraphSpec) -> dict[int, tuple[tuple[int, ...], tuple[int, ...]]]:
    """Per-sample (input shape, output shape) of every layer."""
    shapes = {}
    h = prepare_input(g, np.zeros((1, g.in_features), np.float32))
    with ad.no_grad():
        for layer in g.layers:
            out = apply_layer(layer, h)
            shapes[layer.id] = (h.shape[1:], out.shape[1:])
            h = out
    return shapes


@dataclass
class PartitionPlan:
    """Where every layer runs, plus any per-weight hiding.

    ``hidden`` maps a tensor name (as in :meth:`GraphSpec.named_tensors`) to a
    boolean mask of entries withheld from the untrusted side.
    """

    strategy: str
    placement: dict[int, str]
    slice_placement: str = ENCLAVE
    params: dict = field(default_factory=dict)
    hidden: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_graph(cls, g: GraphSpec, strategy: str = "AS_BUILT") -> "PartitionPlan":
        return cls(strategy, {layer.id: layer.placement for layer in g.layers})

    def apply(self, g: GraphSpec) -> GraphSpec:
        out = g.clone()
        for layer in out.layers:
            layer.placement = self.placement.get(layer.id, layer.placement)
        return out

    def hidden_fraction(self, layer: LayerSpec) -> tuple[int, int]:
        """(hidden entries, total entries) across this layer's weight matrices."""
        hid = tot = 0
        for name, t in layer.weights.items():
            key = f"layer{layer.id}.{name}"
            if key in self.hidden:
                hid += int(self.hidden[key].sum())
                tot += t.data.size
        return hid, tot
