"""TSMD checkpoint files: a JSON manifest followed by raw little-endian tensors."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, InputError
from .graph import ENCLAVE, GraphSpec, LayerSpec, SliceAdapter

MAGIC = b"TSMD"
VERSION = 1
_HEAD = struct.Struct("<4sHI")
_DTYPES = {"F32": "<f4", "F64": "<f8", "I64": "<i8", "Q8": "i1"}
_CODES = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64", np.dtype(np.int64): "I64", np.dtype(np.int8): "Q8"}


def _tensor_items(g: GraphSpec):
    for layer in g.layers:
        for name, t in layer.weights.items():
            yield f"layer{layer.id}.{name}", t
        for name, t in layer.extras.items():
            yield f"layer{layer.id}.extra.{name}", t
    for s in g.slices:
        for name, t in s.weights.items():
            yield f"{s.name}.{name}", t


def encode_checkpoint(g: GraphSpec) -> bytes:
    index, blobs, offset = [], [], 0
    for name, t in _tensor_items(g):
        raw = np.ascontiguousarray(t.data, dtype=_DTYPES[_CODES[t.data.dtype]]).tobytes()
        index.append({
            "name": name, "dtype": _CODES[t.data.dtype], "shape": list(t.shape),
            "offset": offset, "len": len(raw), "requires_grad": t.requires_grad,
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "arch": g.arch,
        "role": g.role,
        "input_kind": g.input_kind,
        "in_features": g.in_features,
        "n_classes": g.n_classes,
        "meta": g.meta,
        "layers": [
            {"id": l.id, "kind": l.kind, "dims": l.dims, "placement": l.placement,
             "weights": list(l.weights), "extras": list(l.extras)}
            for l in g.layers
        ],
        "slices": [
            {"source": s.source, "target": s.target, "kind": s.kind, "d_in": s.d_in, "rank": s.rank,
             "d_out": s.d_out, "site": s.site, "alpha": float(s.alpha.data[0]),
             "alpha_trainable": s.alpha.requires_grad, "placement": ENCLAVE}
            for s in g.slices
        ],
        "tensor_index": index,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _HEAD.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(blobs)


def read_manifest(blob: bytes) -> tuple[dict, int]:
    """Parse and validate the manifest; returns (manifest, data offset)."""
    if len(blob) < _HEAD.size:
        raise FormatError("checkpoint truncated in header")
    magic, version, mlen = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if _HEAD.size + mlen > len(blob):
        raise FormatError("checkpoint truncated in manifest")
    try:
        manifest = json.loads(blob[_HEAD.size : _HEAD.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    problems = validate_index(manifest, len(blob) - _HEAD.size - mlen)
    if problems:
        raise FormatError("; ".join(problems))
    return manifest, _HEAD.size + mlen


def validate_index(manifest: dict, data_len: int) -> list[str]:
    """Check that tensor extents tile the data section exactly."""
    problems = []
    pos = 0
    try:
        for entry in manifest["tensor_index"]:
            size = int(np.prod(entry["shape"], dtype=np.int64)) * np.dtype(_DTYPES[entry["dtype"]]).itemsize
            if entry["offset"] != pos:
                problems.append(f"{entry['name']}: offset {entry['offset']} expected {pos}")
            if entry["len"] != size:
                problems.append(f"{entry['name']}: len {entry['len']} but shape needs {size}")
            pos = entry["offset"] + entry["len"]
    except (KeyError, TypeError) as exc:
        return [f"malformed tensor index: {exc}"]
    if pos != data_len:
        problems.append(f"tensor data spans {pos} bytes, file holds {data_len}")
    return problems


def decode_checkpoint(blob: bytes) -> GraphSpec:
    manifest, base = read_manifest(blob)
    tensors = {}
    for e in manifest["tensor_index"]:
        arr = np.frombuffer(blob, _DTYPES[e["dtype"]], int(np.prod(e["shape"], dtype=np.int64)), base + e["offset"])
        t = Tensor(arr.reshape(e["shape"]).astype(_DTYPES[e["dtype"]][1:] if e["dtype"] != "Q8" else np.int8))
        t.requires_grad = bool(e["requires_grad"]) and e["dtype"] in ("F32", "F64")
        tensors[e["name"]] = t
    try:
        layers = [
            LayerSpec(
                l["id"], l["kind"], l["dims"], l["placement"],
                {n: tensors[f"layer{l['id']}.{n}"] for n in l["weights"]},
                {n: tensors[f"layer{l['id']}.extra.{n}"] for n in l["extras"]},
            )
            for l in manifest["layers"]
        ]
        slices = []
        for s in manifest["slices"]:
            ad_ = SliceAdapter(
                s["source"], s["target"], s["kind"], s["d_in"], s["rank"], s["d_out"],
                Tensor(np.array([s["alpha"]], np.float32), requires_grad=s["alpha_trainable"]), {}, s["site"],
            )
            ad_.weights = {n: tensors[f"{ad_.name}.{n}"] for n in ("down", "up")}
            slices.append(ad_)
        return GraphSpec(
            manifest["arch"], manifest["input_kind"], manifest["in_features"], manifest["n_classes"],
            layers, slices, manifest["role"], manifest.get("meta", {}),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest inconsistent with tensor index: {exc}") from exc


def save_checkpoint(g: GraphSpec, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(g))


def load_checkpoint(path) -> GraphSpec:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise InputError(f"checkpoint not found: {path}") from exc
    return decode_checkpoint(blob)


def public_export(g: GraphSpec) -> GraphSpec:
    """What the untrusted worker may hold: weights of UNTRUSTED layers only."""
    out = g.clone()
    out.slices = []
    out.role = "PUBLIC_EXPORT"
    out.meta = {k: v for k, v in out.meta.items() if k == "run_config"}
    for layer in out.layers:
        layer.extras = {}
        if layer.placement == ENCLAVE:
            layer.weights = {}
    return out
