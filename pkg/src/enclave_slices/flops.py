"""FLOPs accounting and the share of work kept inside the enclave."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InputError
from .graph import ENCLAVE, GraphSpec, LayerSpec, PartitionPlan, SliceAdapter, layer_shapes


def linear_flops(c_in: int, c_out: int, tokens: int = 1) -> int:
    return 2 * c_in * c_out * tokens


def conv_flops(c_in: int, c_out: int, k: int, h: int, w: int) -> int:
    return 2 * c_in * k * k * h * w * c_out


def batchnorm_flops(c: int, h: int, w: int) -> int:
    return 2 * c * h * w


def relu_flops(c: int, h: int = 1, w: int = 1) -> int:
    return c * h * w


def attention_flops(d: int, tokens: int, mode: str = "standard") -> int:
    proj = 4 * linear_flops(d, d, tokens)
    if mode == "linear":
        # score and output projections read Concat(.,.) of width 2d; weighted sum over tokens
        return proj + 2 * linear_flops(2 * d, d, tokens) + 2 * tokens * d
    # q k^T and attn @ v
    return proj + 2 * (2 * tokens * tokens * d)


def layer_flops(layer: LayerSpec, h: int | None = None, w: int | None = None, tokens: int = 1) -> int:
    """FLOPs of one layer; ``h, w`` are output spatial dims (required for conv / batchnorm)."""
    d = layer.dims
    kind = layer.kind
    if kind in ("conv2d", "batchnorm") and (h is None or w is None):
        raise InputError(f"{kind} layer {layer.id} needs spatial dims")
    if kind == "linear":
        return linear_flops(d["c_in"], d["c_out"], tokens)
    if kind == "classifier":
        return linear_flops(d["c_in"], d["n_classes"])
    if kind == "conv2d":
        return conv_flops(d["c_in"], d["c_out"], d["k"], h, w)
    if kind == "batchnorm":
        return batchnorm_flops(d["c"], h, w)
    if kind == "relu":
        return relu_flops(d["c"], h or 1, w or 1) * tokens
    if kind == "attention":
        return attention_flops(d["d_model"], tokens, d.get("mode", "standard"))
    if kind == "ffn":
        return 2 * linear_flops(d["d_model"], d["d_hidden"], tokens) + relu_flops(d["d_hidden"]) * tokens
    raise InputError(f"no FLOPs rule for layer kind {kind!r}")


def slice_flops(s: SliceAdapter, h: int = 1, w: int = 1, tokens: int = 1) -> int:
    if s.kind == "conv1x1":
        return conv_flops(s.d_in, s.rank, 1, h, w) + conv_flops(s.rank, s.d_out, 1, h, w)
    return linear_flops(s.d_in, s.rank, tokens) + linear_flops(s.rank, s.d_out, tokens)


def _geometry(shape: tuple[int, ...]) -> tuple[int | None, int | None, int]:
    """(h, w, tokens) for a per-sample activation shape."""
    if len(shape) == 3:
        return shape[1], shape[2], 1
    if len(shape) == 2:
        return None, None, shape[0]
    return None, None, 1


@dataclass
class FlopsReport:
    per_layer: list[tuple[str, int]]
    in_tee: list[int]  # FLOPs of each entry executed inside the enclave
    tee_flops: int = 0
    total_flops: int = 0
    percent_tee: float = 0.0
    strategy: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.total_flops = sum(f for _, f in self.per_layer)
        self.tee_flops = sum(self.in_tee)
        self.percent_tee = self.tee_flops / self.total_flops if self.total_flops else 0.0

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "tee_flops": self.tee_flops,
            "total_flops": self.total_flops,
            "percent_tee": self.percent_tee,
            "per_layer": [{"name": n, "flops": f, "tee_flops": t} for (n, f), t in zip(self.per_layer, self.in_tee)],
        }

    def csv_rows(self) -> list[list]:
        return [["name", "flops", "tee_flops"]] + [[n, f, t] for (n, f), t in zip(self.per_layer, self.in_tee)]


def percent_flops(g: GraphSpec, plan: PartitionPlan | None = None) -> FlopsReport:
    """Per-layer FLOPs and the enclave share under ``plan`` (default: the graph's own placements).

    Partially hidden layers contribute the hidden fraction of their FLOPs.
    """
    plan = plan or PartitionPlan.from_graph(g)
    shapes = layer_shapes(g)
    unit_of = g.unit_of()
    unit_input = {}
    for layer in g.layers:
        unit_input.setdefault(unit_of[layer.id], shapes[layer.id][0])
    names, flops, tee = [], [], []
    for layer in g.layers:
        in_shape, out_shape = shapes[layer.id]
        h, w, _ = _geometry(out_shape)
        _, _, tokens = _geometry(in_shape)
        f = layer_flops(layer, h, w, tokens)
        placement = plan.placement.get(layer.id, layer.placement)
        if placement == ENCLAVE:
            t = f
        else:
            hid, tot = plan.hidden_fraction(layer)
            t = f * hid // tot if tot else 0
        names.append(f"layer{layer.id}:{layer.kind}")
        flops.append(f)
        tee.append(t)
    for s in g.slices:
        # conv slices run at the target unit's input resolution
        h, w, tokens = _geometry(unit_input[s.target if s.kind != "lora" else s.source])
        f = slice_flops(s, h or 1, w or 1, tokens)
        names.append(s.name)
        flops.append(f)
        tee.append(f if plan.slice_placement == ENCLAVE else 0)
    return FlopsReport(list(zip(names, flops)), tee, strategy=plan.strategy)


def throughput(latencies_ms: list[float]) -> float:
    """Inferences per second from per-inference latencies in milliseconds."""
    if not latencies_ms:
        return 0.0
    avg = sum(latencies_ms) / len(latencies_ms)
    return 1000.0 / avg if avg > 0 else math.inf
