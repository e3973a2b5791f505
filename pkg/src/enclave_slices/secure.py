"""Enclave-side deployment: quantized execution, masked offloading, verification.

One executor drives three interchangeable backends, so the float model, the
single-process quantized reference and the partitioned deployment differ only
in how each offloadable product is computed:

* ``None``            -- float weights, no quantization (the training-time model)
* :class:`LocalIntBackend` -- exact int8 products in-process (the reference)
* :class:`RemoteBackend`   -- mask, ship to the worker, verify, unmask
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_rng
from .errors import IntegrityError, ProtocolError, SecurityError
from .fieldmath import ACCEPT, FieldSpec, centered_lift, freivalds_check, mask, to_field, unmask
from .graph import Hooks, GraphSpec, LayerSpec, forward_with_taps, predict
from .offload import SLOTS, OffloadOp, PadStore, QuantParams, fresh_key, offload_ops, ops_digest, quantize
from .protocol import ClientSession, Transport, close_session, handshake, linear_request

log = logging.getLogger(__name__)

CALIBRATION_SAMPLES = 128


class _Recorder(Hooks):
    def __init__(self, keys):
        self.keys = keys
        self.peak: dict[tuple[int, str], float] = {}

    def _see(self, layer, name, x):
        key = (layer.id, name)
        if key in self.keys:
            self.peak[key] = max(self.peak.get(key, 0.0), float(np.abs(x.data).max()) if x.data.size else 0.0)

    def linear(self, layer, name, x):
        self._see(layer, name, x)
        return super().linear(layer, name, x)

    def conv(self, layer, x):
        self._see(layer, "w", x)
        return super().conv(layer, x)


def calibrate(g: GraphSpec, ops: dict[int, OffloadOp], x_calib: np.ndarray) -> dict[int, QuantParams]:
    """Symmetric activation scales from a max-abs pass over (at most) 128 samples."""
    rec = _Recorder({(op.layer_id, op.name) for op in ops.values()})
    with ad.no_grad():
        forward_with_taps(g, np.asarray(x_calib[:CALIBRATION_SAMPLES], dtype=np.float32), rec)
    out = {}
    for op_id, op in ops.items():
        peak = rec.peak.get((op.layer_id, op.name), 0.0)
        out[op_id] = QuantParams(peak / 127 if peak > 0 else 1.0)
    return out


@dataclass
class Deployment:
    """A hybrid graph plus the quantized form of each offloadable product."""

    graph: GraphSpec
    ops: dict[int, OffloadOp]
    act: dict[int, QuantParams]
    field_spec: FieldSpec = field(default_factory=FieldSpec)

    def __post_init__(self):
        for op in self.ops.values():
            self.field_spec.check_fan_in(op.fan_in)

    @property
    def digest(self) -> str:
        return ops_digest(self.ops)

    def op_for(self, layer: LayerSpec, name: str) -> OffloadOp | None:
        return self.ops.get(layer.id * 8 + SLOTS.get(name, 0))


def deploy(g: GraphSpec, x_calib: np.ndarray, field_spec: FieldSpec | None = None) -> Deployment:
    ops = offload_ops(g)
    return Deployment(g, ops, calibrate(g, ops, x_calib), field_spec or FieldSpec())


class LocalIntBackend:
    """Single-process quantized reference: exact signed integer products."""

    def run(self, op: OffloadOp, xq: np.ndarray) -> np.ndarray:
        return op.apply_int(xq)


class QuantHooks(Hooks):
    def __init__(self, dep: Deployment, backend):
        self.dep = dep
        self.backend = backend

    def _offload(self, op: OffloadOp, x: Tensor) -> Tensor:
        qp = self.dep.act[op.op_id]
        y_int = self.backend.run(op, quantize(x.data, qp))
        # contiguous so downstream reductions sum in the same order on every backend
        y = np.ascontiguousarray(y_int, dtype=np.float32) * np.float32(qp.scale * op.w_scale)
        return Tensor(y)

    def linear(self, layer, name, x):
        op = self.dep.op_for(layer, name)
        return super().linear(layer, name, x) if op is None else self._offload(op, x)

    def conv(self, layer, x):
        op = self.dep.op_for(layer, "w")
        return super().conv(layer, x) if op is None else self._offload(op, x)


def reference_logits(dep: Deployment, x, batch_size: int = 100) -> np.ndarray:
    """Monolithic quantized forward (no masking, no worker)."""
    hooks = QuantHooks(dep, LocalIntBackend())
    x = np.asarray(x, dtype=np.float32)
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward_with_taps(dep.graph, x[i : i + batch_size], hooks).data)
    return np.concatenate(out) if out else np.zeros((0, dep.graph.n_classes), np.float32)


@dataclass
class SessionStats:
    requests: int = 0
    checks: int = 0
    pads_used: int = 0
    remote_s: float = 0.0  # wall time spent waiting on the worker


class EnclaveSession:
    """Enclave half of a split-inference session.

    Holds the private graph, the pad stock and the channel to the worker.  Only
    masked u32 residues of public-layer activations ever reach the transport.
    """

    def __init__(
        self,
        dep: Deployment,
        pads: PadStore,
        transport: Transport | None,
        verify_rate: float = 0.1,
        seed: int = 0,
        session_id: int = 1,
        push_weights: bool = False,
    ):
        if not 0.0 <= verify_rate <= 1.0:
            raise ValueError("verify_rate must lie in [0, 1]")
        self.dep = dep
        self.pads = pads
        self.transport = transport
        self.verify_rate = verify_rate
        self.rng = make_rng(seed, "enclave-session", session_id)
        self.session_id = session_id
        self.push_weights = push_weights
        self.client: ClientSession | None = None
        self.aborted = False
        self.stats = SessionStats()

    def open(self) -> None:
        if self.aborted:
            raise IntegrityError("session was aborted after a failed verification")
        if self.client is not None or not self.dep.ops:
            return
        if self.transport is None:
            raise ProtocolError("deployment offloads layers but no transport was given")
        if self.pads.field_spec.p != self.dep.field_spec.p:
            raise SecurityError("pad store and deployment use different fields")
        push = self.dep.ops if self.push_weights else None
        self.client = handshake(self.transport, self.session_id, self.dep.field_spec.p, self.dep.digest, push)

    def close(self) -> None:
        if self.client is not None:
            close_session(self.client)
            self.client = None

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # backend protocol
    def run(self, op: OffloadOp, xq: np.ndarray) -> np.ndarray:
        if self.aborted:
            raise IntegrityError("session was aborted after a failed verification")
        p = self.dep.field_spec.p
        r, g_r = self.pads.take(op, len(xq))
        self.stats.pads_used += len(xq)
        h_e = mask(to_field(xq, p), r, p)
        t0 = time.perf_counter()
        y_e = linear_request(self.client, op.op_id, h_e)
        self.stats.remote_s += time.perf_counter() - t0
        self.stats.requests += 1
        if y_e.shape != g_r.shape:
            raise ProtocolError(f"op {op.op_id}: response shape {y_e.shape} != {g_r.shape}")
        if self.verify_rate > 0 and self.rng.random() < self.verify_rate:
            self.stats.checks += 1
            key = fresh_key(op, self.dep.field_spec, self.rng)
            if freivalds_check(h_e, y_e, key, p) != ACCEPT:
                self.aborted = True
                self.close()
                raise IntegrityError(f"worker result for op {op.op_id} failed verification; session aborted")
        return centered_lift(unmask(y_e, g_r, p), p)

    def logits(self, x, batch_size: int = 100) -> np.ndarray:
        self.open()
        hooks = QuantHooks(self.dep, self)
        x = np.asarray(x, dtype=np.float32)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(forward_with_taps(self.dep.graph, x[i : i + batch_size], hooks).data)
        return np.concatenate(out) if out else np.zeros((0, self.dep.graph.n_classes), np.float32)


def enclave_infer(session: EnclaveSession, x, return_logits: bool = False, batch_size: int = 100) -> np.ndarray:
    """Split inference; returns predicted labels unless ``return_logits`` is set."""
    logits = session.logits(x, batch_size)
    return logits if return_logits else logits.argmax(axis=1)


def float_labels(g: GraphSpec, x) -> np.ndarray:
    return predict(g, x).argmax(axis=1)
