"""Offloadable linear operations, weight quantization, and one-time pad stock.

An *op* is one weight-times-activation product that the untrusted worker may
compute: a linear layer, a conv layer, an attention projection, or an FFN
matrix.  Op ids are ``layer_id * 8 + slot``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import col2im, conv_output_size, im2col
from .errors import DimensionError, FormatError, PadExhaustedError, StalePadError
from .fieldmath import FieldSpec, FreivaldsKey, exact_matmul

SLOTS = {"w": 0, "wq": 0, "wk": 1, "wv": 2, "wo": 3, "w1": 0, "w2": 1}
OFFLOADABLE = ("linear", "conv2d", "attention", "ffn")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    bits: int = 8

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("quantization scale must be positive")


def quantize(h, qp: QuantParams) -> np.ndarray:
    q = np.rint(np.asarray(h, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return ((np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale).astype(np.float32)


def quantize_weights(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8 in [-127, 127]."""
    peak = float(np.abs(w).max()) if w.size else 0.0
    scale = peak / 127 if peak > 0 else 1.0
    return np.clip(np.rint(w / scale), -127, 127).astype(np.int8), scale


@dataclass
class OffloadOp:
    op_id: int
    layer_id: int
    name: str
    kind: str  # "linear" | "conv"
    w: np.ndarray  # int8, (c_out, c_in) or (c_out, c_in, k, k)
    w_scale: float = 1.0
    stride: int = 1
    pad: int = 0
    in_shape: tuple | None = None
    out_shape: tuple | None = None

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.w.shape[1:]))

    @property
    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(struct.pack("<IB", self.op_id, 1 if self.kind == "conv" else 0))
        h.update(struct.pack("<II", self.stride, self.pad))
        h.update(struct.pack(f"<{self.w.ndim}I", *self.w.shape))
        h.update(np.ascontiguousarray(self.w, dtype=np.int8).tobytes())
        return h.digest()

    def meta(self) -> dict:
        return {"kind": self.kind, "stride": self.stride, "pad": self.pad}

    def apply_int(self, h: np.ndarray) -> np.ndarray:
        """Exact integer product for a batch ``h`` shaped (n, *in_shape)."""
        h = np.asarray(h, dtype=np.int64)
        if self.kind == "conv":
            if h.ndim != 4 or h.shape[1] != self.w.shape[1]:
                raise DimensionError(f"op {self.op_id}: conv input {h.shape} vs kernel {self.w.shape}")
            n, _, hh, ww = h.shape
            k = self.w.shape[2]
            ho, wo = conv_output_size(hh, k, self.stride, self.pad), conv_output_size(ww, k, self.stride, self.pad)
            cols = im2col(h, k, self.stride, self.pad)
            out = exact_matmul(cols, self.w.reshape(len(self.w), -1).T)
            return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        if h.shape[-1] != self.w.shape[1]:
            raise DimensionError(f"op {self.op_id}: input width {h.shape[-1]} vs {self.w.shape[1]}")
        out = exact_matmul(h.reshape(-1, h.shape[-1]), self.w.T.astype(np.int64))
        return out.reshape(h.shape[:-1] + (self.w.shape[0],))

    def apply_field(self, h: np.ndarray, p: int) -> np.ndarray:
        return np.mod(self.apply_int(h), p)

    def adjoint_field(self, s: np.ndarray, p: int) -> np.ndarray:
        """W^T applied to one output-shaped vector ``s`` (mod p)."""
        s = np.asarray(s, dtype=np.int64)
        if self.kind == "conv":
            o, ho, wo = s.shape
            cols = exact_matmul(s.transpose(1, 2, 0).reshape(ho * wo, o), self.w.reshape(o, -1).astype(np.int64))
            k = self.w.shape[2]
            return np.mod(col2im(cols, (1,) + tuple(self.in_shape), k, self.stride, self.pad)[0], p)
        return np.mod(exact_matmul(s.reshape(-1, s.shape[-1]), self.w.astype(np.int64)), p).reshape(
            s.shape[:-1] + (self.w.shape[1],)
        )


def offload_ops(g, with_shapes: bool = True) -> dict[int, OffloadOp]:
    """Quantized ops for every UNTRUSTED weighted layer of ``g`` (classifier never included)."""
    from .graph import UNTRUSTED, layer_shapes

    shapes = layer_shapes(g) if with_shapes else {}
    ops: dict[int, OffloadOp] = {}
    for layer in g.layers:
        if layer.placement != UNTRUSTED or layer.kind not in OFFLOADABLE:
            continue
        names = {"linear": ("w",), "conv2d": ("w",), "attention": ("wq", "wk", "wv", "wo"), "ffn": ("w1", "w2")}[layer.kind]
        for name in names:
            wq, scale = quantize_weights(layer.weights[name].data)
            op_id = layer.id * 8 + SLOTS[name]
            op = OffloadOp(op_id, layer.id, name, "conv" if layer.kind == "conv2d" else "linear", wq, scale)
            if layer.kind == "conv2d":
                op.stride, op.pad = layer.dims["stride"], layer.dims["pad"]
            if with_shapes:
                in_shape, out_shape = shapes[layer.id]
                if layer.kind == "ffn" and name == "w2":
                    in_shape = in_shape[:-1] + (layer.dims["d_hidden"],)
                elif layer.kind == "ffn":
                    out_shape = out_shape[:-1] + (layer.dims["d_hidden"],)
                op.in_shape, op.out_shape = tuple(in_shape), tuple(out_shape)
            ops[op_id] = op
    return ops


def ops_digest(ops: dict[int, OffloadOp]) -> str:
    h = hashlib.sha256()
    for op_id in sorted(ops):
        h.update(ops[op_id].digest)
    return h.hexdigest()


def fresh_key(op: OffloadOp, field_spec: FieldSpec, rng) -> FreivaldsKey:
    """Uniform s over the field and its adjoint image for one op."""
    s = rng.integers(0, field_spec.p, size=op.out_shape, dtype=np.int64)
    return FreivaldsKey(s, op.adjoint_field(s, field_spec.p), op.digest)


# ---------------------------------------------------------------- pads


PAD_MAGIC = b"TSPD"
PAD_VERSION = 1
_PAD_HEADER = struct.Struct("<4sHQ")
_PAD_RECORD = struct.Struct("<I32sI")


@dataclass
class PadEntry:
    op_id: int
    digest: bytes
    r: np.ndarray  # (count, *in_shape)
    g_r: np.ndarray  # (count, *out_shape)
    cursor: int = 0

    @property
    def remaining(self) -> int:
        return len(self.r) - self.cursor


def precompute_pads(op: OffloadOp, count: int, field_spec: FieldSpec, rng) -> PadEntry:
    """``count`` fresh pads and their exact images under the op's current weights."""
    r = rng.integers(0, field_spec.p, size=(count,) + tuple(op.in_shape), dtype=np.int64)
    g_r = op.apply_field(r, field_spec.p) if count else np.zeros((0,) + tuple(op.out_shape), np.int64)
    return PadEntry(op.op_id, op.digest, r, g_r)


@dataclass
class PadStore:
    field_spec: FieldSpec = field(default_factory=FieldSpec)
    entries: dict[int, PadEntry] = field(default_factory=dict)
    consumed: list[tuple[int, int]] = field(default_factory=list)  # (op_id, pad index) audit trail

    def fill(self, ops: dict[int, OffloadOp], count: int, rng) -> None:
        for op_id in sorted(ops):
            self.entries[op_id] = precompute_pads(ops[op_id], count, self.field_spec, rng)

    def remaining(self, op_id: int) -> int:
        e = self.entries.get(op_id)
        return e.remaining if e else 0

    def take(self, op: OffloadOp, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Consume ``k`` pads for ``op``; the cursor advances before anything is returned."""
        e = self.entries.get(op.op_id)
        if e is None or e.remaining < k:
            have = e.remaining if e else 0
            raise PadExhaustedError(f"op {op.op_id}: need {k} pads, {have} left")
        if e.digest != op.digest:
            raise StalePadError(f"op {op.op_id}: pads were computed for different weights")
        start = e.cursor
        e.cursor += k
        self.consumed.extend((op.op_id, i) for i in range(start, start + k))
        return e.r[start : start + k], e.g_r[start : start + k]

    def encode(self) -> bytes:
        """Serialize unused pads only."""
        out = [_PAD_HEADER.pack(PAD_MAGIC, PAD_VERSION, self.field_spec.p)]
        for op_id in sorted(self.entries):
            e = self.entries[op_id]
            n = e.remaining
            out.append(_PAD_RECORD.pack(op_id, e.digest, n))
            out.append(e.r[e.cursor :].astype("<u4").tobytes())
            out.append(e.g_r[e.cursor :].astype("<u4").tobytes())
        return b"".join(out)

    @classmethod
    def decode(cls, blob: bytes, ops: dict[int, OffloadOp]) -> "PadStore":
        """Parse a pad file; ``ops`` supplies each record's tensor geometry."""
        if len(blob) < _PAD_HEADER.size:
            raise FormatError("pad file truncated in header")
        magic, version, p = _PAD_HEADER.unpack_from(blob)
        if magic != PAD_MAGIC:
            raise FormatError(f"bad pad-file magic {magic!r}")
        if version != PAD_VERSION:
            raise FormatError(f"unsupported pad-file version {version}")
        store = cls(FieldSpec(p))
        off = _PAD_HEADER.size
        while off < len(blob):
            if off + _PAD_RECORD.size > len(blob):
                raise FormatError(f"pad record truncated at byte {off}")
            op_id, digest, n = _PAD_RECORD.unpack_from(blob, off)
            off += _PAD_RECORD.size
            op = ops.get(op_id)
            if op is None:
                raise FormatError(f"pad record for unknown op {op_id}")
            rn, gn = n * int(np.prod(op.in_shape)), n * int(np.prod(op.out_shape))
            if off + 4 * (rn + gn) > len(blob):
                raise FormatError(f"pad data for op {op_id} truncated")
            r = np.frombuffer(blob, "<u4", rn, off).astype(np.int64).reshape((n,) + tuple(op.in_shape))
            off += 4 * rn
            g_r = np.frombuffer(blob, "<u4", gn, off).astype(np.int64).reshape((n,) + tuple(op.out_shape))
            off += 4 * gn
            store.entries[op_id] = PadEntry(op_id, digest, r, g_r)
        return store
