"""Wire protocol between the enclave role and the untrusted worker.

Every message is self-delimiting::

    "TSLC" | u16 version | u8 msg_type | u64 session_id | u32 layer_id | u64 seq
    | u8 dtype | u8 ndim | u32 dims[ndim] | u64 payload_len | payload

Only byte, int8 and u32 tensors have a wire encoding; there is no float code,
so float activations or weights cannot be put on the wire by construction.
The same bytes travel over TCP and over the in-process queue transport.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .autodiff import make_rng
from .errors import (
    ContractError,
    DecodeError,
    HandshakeError,
    ProtocolError,
    SliceError,
    TransportError,
)
from .offload import OffloadOp, ops_digest

log = logging.getLogger(__name__)

MAGIC = b"TSLC"
VERSION = 1
HEADER = struct.Struct("<4sHBQIQBB")
_LEN = struct.Struct("<Q")
MAX_NDIM = 8
MAX_PAYLOAD = 1 << 30


class MsgType(IntEnum):
    HELLO = 1
    MODEL_PUSH = 2
    LINEAR_REQ = 3
    LINEAR_RESP = 4
    ERROR = 5
    BYE = 6


class DType(IntEnum):
    U8 = 1
    I8 = 2
    U32 = 3


ITEMSIZE = {DType.U8: 1, DType.I8: 1, DType.U32: 4}
NUMPY = {DType.U8: "u1", DType.I8: "i1", DType.U32: "<u4"}


@dataclass(frozen=True)
class Message:
    msg_type: int
    session_id: int = 0
    layer_id: int = 0
    seq: int = 0
    dtype: int = DType.U8
    dims: tuple = (0,)
    payload: bytes = b""
    version: int = VERSION

    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, NUMPY[DType(self.dtype)]).reshape(self.dims)

    def text(self) -> str:
        return self.payload.decode("utf-8", errors="replace")

    def json(self) -> dict:
        try:
            return json.loads(self.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"malformed JSON payload: {exc}") from exc

    @classmethod
    def tensor(cls, msg_type: int, arr, **kw) -> "Message":
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            raise ContractError("floating-point tensors have no wire encoding")
        if arr.dtype == np.int8:
            dt = DType.I8
        elif arr.dtype == np.uint8:
            dt = DType.U8
        elif arr.dtype.kind in "iu":
            if arr.size and (arr.min() < 0 or arr.max() >= 2**32):
                raise ContractError("residues must lie in [0, 2^32)")
            dt = DType.U32
        else:
            raise ContractError(f"no wire encoding for dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=NUMPY[dt]).tobytes()
        return cls(msg_type, dtype=dt, dims=tuple(int(d) for d in arr.shape), payload=data, **kw)

    @classmethod
    def with_text(cls, msg_type: int, text: str, **kw) -> "Message":
        data = text.encode("utf-8")
        return cls(msg_type, dtype=DType.U8, dims=(len(data),), payload=data, **kw)

    @classmethod
    def with_json(cls, msg_type: int, obj: dict, **kw) -> "Message":
        return cls.with_text(msg_type, json.dumps(obj, sort_keys=True), **kw)


def encode(msg: Message) -> bytes:
    if len(msg.dims) > MAX_NDIM:
        raise ContractError(f"at most {MAX_NDIM} dims")
    expected = int(np.prod(msg.dims, dtype=np.int64)) * ITEMSIZE[DType(msg.dtype)]
    if expected != len(msg.payload):
        raise ContractError(f"payload is {len(msg.payload)} bytes, dims declare {expected}")
    try:
        head = HEADER.pack(
            MAGIC, msg.version, int(msg.msg_type), msg.session_id, msg.layer_id, msg.seq, int(msg.dtype), len(msg.dims)
        )
        dims = struct.pack(f"<{len(msg.dims)}I", *msg.dims)
    except struct.error as exc:
        raise ContractError(f"message field out of range: {exc}") from exc
    return head + dims + _LEN.pack(len(msg.payload)) + msg.payload


def decode(blob: bytes, version: int = VERSION) -> Message:
    """Parse one message; every failure is a :class:`DecodeError` carrying the byte offset.

    ERROR messages are accepted at any version so a peer can always explain a hang-up.
    """
    blob = bytes(blob)
    if len(blob) < HEADER.size:
        raise DecodeError("truncated header", len(blob))
    magic, ver, mtype, sid, lid, seq, dtype, ndim = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    if mtype not in MsgType._value2member_map_:
        raise DecodeError(f"unknown msg_type {mtype}", 6)
    if ver != version and mtype != MsgType.ERROR:
        raise DecodeError(f"version {ver} != {version}", 4)
    if dtype not in DType._value2member_map_:
        raise DecodeError(f"unknown dtype {dtype}", 27)
    if ndim > MAX_NDIM:
        raise DecodeError(f"ndim {ndim} exceeds {MAX_NDIM}", 28)
    off = HEADER.size
    if len(blob) < off + 4 * ndim + _LEN.size:
        raise DecodeError("truncated dims / length field", len(blob))
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    (plen,) = _LEN.unpack_from(blob, off)
    expected = int(np.prod(dims, dtype=object)) * ITEMSIZE[DType(dtype)]
    if plen != expected:
        raise DecodeError(f"payload_len {plen} != {expected} implied by dims", off)
    off += _LEN.size
    if len(blob) < off + plen:
        raise DecodeError("truncated payload", len(blob))
    if len(blob) > off + plen:
        raise DecodeError("trailing bytes after payload", off + plen)
    return Message(MsgType(mtype), sid, lid, seq, DType(dtype), tuple(dims), blob[off:], ver)


def frame_length(prefix: bytes) -> int | None:
    """Total message length once enough of ``prefix`` is known, else None."""
    if len(prefix) < HEADER.size:
        return None
    ndim = prefix[HEADER.size - 1]
    if ndim > MAX_NDIM:
        raise DecodeError(f"ndim {ndim} exceeds {MAX_NDIM}", 28)
    end = HEADER.size + 4 * ndim + _LEN.size
    if len(prefix) < end:
        return None
    (plen,) = _LEN.unpack_from(prefix, end - _LEN.size)
    if plen > MAX_PAYLOAD:
        raise DecodeError(f"payload_len {plen} exceeds limit", end - _LEN.size)
    return end + plen


# ---------------------------------------------------------------- transports


class Transport:
    """Whole-message duplex channel.  ``capture`` (if a list) records (direction, bytes)."""

    mode = "ABSTRACT"

    def __init__(self, version: int = VERSION, capture: list | None = None, timeout: float | None = 30.0):
        self.version = version
        self.capture = capture
        self.timeout = timeout
        self.closed = False

    def send(self, msg: Message) -> None:
        if msg.version != self.version:
            msg = Message(**{**msg.__dict__, "version": self.version})
        data = encode(msg)
        if self.capture is not None:
            self.capture.append(("out", data))
        self._send_bytes(data)

    def recv(self) -> Message:
        data = self._recv_bytes()
        if self.capture is not None:
            self.capture.append(("in", data))
        return decode(data, self.version)

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        self.closed = True


class QueueTransport(Transport):
    mode = "IN_PROCESS"

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, **kw):
        super().__init__(**kw)
        self.inbox, self.outbox = inbox, outbox

    @classmethod
    def pair(cls, **kw) -> tuple["QueueTransport", "QueueTransport"]:
        a, b = queue.Queue(), queue.Queue()
        kw_b = {k: v for k, v in kw.items() if k != "capture"}
        return cls(a, b, **kw), cls(b, a, **kw_b)

    def _send_bytes(self, data: bytes) -> None:
        if self.closed:
            raise TransportError("transport closed")
        self.outbox.put(data)

    def _recv_bytes(self) -> bytes:
        if self.closed:
            raise TransportError("transport closed")
        try:
            data = self.inbox.get(timeout=self.timeout)
        except queue.Empty as exc:
            raise TransportError("timed out waiting for peer") from exc
        if data is None:
            self.closed = True
            raise TransportError("peer closed the channel")
        return data

    def close(self) -> None:
        if not self.closed:
            self.outbox.put(None)
        super().close()


class TCPTransport(Transport):
    mode = "TCP"

    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        self.sock = sock
        sock.settimeout(self.timeout)

    @classmethod
    def connect(cls, address: str, **kw) -> "TCPTransport":
        host, port = parse_address(address)
        try:
            sock = socket.create_connection((host, port), timeout=kw.get("timeout", 30.0))
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from exc
        return cls(sock, **kw)

    def _send_bytes(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def _recv_bytes(self) -> bytes:
        data = self._read(HEADER.size)
        data += self._read(4 * data[HEADER.size - 1] + _LEN.size) if data[HEADER.size - 1] <= MAX_NDIM else b""
        total = frame_length(data)
        return data + self._read(total - len(data))

    def close(self) -> None:
        try:
            self.sock.close()
        finally:
            super().close()


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as exc:
        raise TransportError(f"bad address {address!r}, expected host:port") from exc


# ---------------------------------------------------------------- sessions


@dataclass
class ClientSession:
    transport: Transport
    session_id: int
    seq: int = 0
    open: bool = False

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq


def handshake(
    transport: Transport, session_id: int, p: int, digest: str, push: dict[int, OffloadOp] | None = None
) -> ClientSession:
    """Enclave side: HELLO exchange, then (optionally) push public weights."""
    hello = {"p": p, "digest": digest, "push": push is not None}
    if push is not None:
        hello["ops"] = {str(k): op.meta() for k, op in sorted(push.items())}
    transport.send(Message.with_json(MsgType.HELLO, hello, session_id=session_id, seq=0))
    reply = transport.recv()
    if reply.msg_type == MsgType.ERROR:
        raise HandshakeError(f"worker refused session: {reply.text()}")
    if reply.msg_type != MsgType.HELLO or reply.session_id != session_id:
        raise HandshakeError(f"unexpected handshake reply type {reply.msg_type} session {reply.session_id}")
    sess = ClientSession(transport, session_id, open=True)
    for op_id, op in sorted((push or {}).items()):
        transport.send(Message.tensor(MsgType.MODEL_PUSH, op.w, session_id=session_id, layer_id=op_id, seq=sess.next_seq()))
        ack = transport.recv()
        if ack.msg_type != MsgType.MODEL_PUSH or ack.layer_id != op_id:
            raise HandshakeError(f"model push for op {op_id} not acknowledged: {ack.text() if ack.msg_type == MsgType.ERROR else ack.msg_type}")
    return sess


def linear_request(sess: ClientSession, op_id: int, h_e: np.ndarray) -> np.ndarray:
    """Stop-and-wait LINEAR_REQ / LINEAR_RESP round trip."""
    if not sess.open:
        raise ProtocolError("session is closed")
    seq = sess.next_seq()
    sess.transport.send(Message.tensor(MsgType.LINEAR_REQ, h_e.astype(np.uint32), session_id=sess.session_id, layer_id=op_id, seq=seq))
    resp = sess.transport.recv()
    if resp.msg_type == MsgType.ERROR:
        raise ProtocolError(f"worker error for op {op_id}: {resp.text()}")
    if resp.msg_type != MsgType.LINEAR_RESP or resp.seq != seq or resp.session_id != sess.session_id:
        raise ProtocolError(f"response does not match request seq {seq} (got type {resp.msg_type}, seq {resp.seq})")
    if resp.dtype != DType.U32 or resp.layer_id != op_id:
        raise ProtocolError("malformed LINEAR_RESP")
    return resp.array().astype(np.int64)


def close_session(sess: ClientSession) -> None:
    if sess.open:
        sess.open = False
        try:
            sess.transport.send(Message(MsgType.BYE, session_id=sess.session_id, seq=sess.next_seq()))
        except SliceError:
            pass


# ---------------------------------------------------------------- worker


@dataclass
class Worker:
    """Untrusted role: holds public quantized weights and computes field products."""

    ops: dict[int, OffloadOp] = field(default_factory=dict)
    p: int = 2**31 - 1
    fault_rate: float = 0.0
    seed: int = 0
    served: int = 0

    def __post_init__(self):
        self.rng = make_rng(self.seed, "fault")
        self.lock = threading.Lock()

    def _faulty(self, y: np.ndarray) -> np.ndarray:
        with self.lock:
            if self.fault_rate <= 0 or self.rng.random() >= self.fault_rate:
                return y
            y = y.copy()
            idx = int(self.rng.integers(y.size))
            y.flat[idx] = (y.flat[idx] + 1 + int(self.rng.integers(self.p - 1))) % self.p
            return y

    def compute(self, op_id: int, h_e: np.ndarray, ops: dict[int, OffloadOp]) -> np.ndarray:
        op = ops.get(op_id)
        if op is None:
            raise KeyError(op_id)
        if h_e.size and int(h_e.max()) >= self.p:
            raise ProtocolError("request holds values outside the field")
        return self._faulty(op.apply_field(h_e.astype(np.int64), self.p))

    def serve(self, transport: Transport) -> None:
        """Serve one session until BYE, a fatal protocol error, or disconnect."""
        try:
            self._serve(transport)
        except ProtocolError as exc:
            log.warning("worker dropped session: %s", exc)
        except TransportError as exc:
            log.info("worker session ended: %s", exc)
        finally:
            transport.close()

    def _reply_error(self, transport, text, **kw):
        try:
            transport.send(Message.with_text(MsgType.ERROR, text, **kw))
        except SliceError:
            pass

    def _serve(self, transport: Transport) -> None:
        sid = None
        ops = self.ops
        pending: dict[int, dict] | None = None
        expected_digest = None
        last_seq = 0
        while True:
            try:
                msg = transport.recv()
            except DecodeError as exc:
                self._reply_error(transport, f"decode error: {exc}", session_id=sid or 0)
                return
            if msg.msg_type == MsgType.HELLO:
                if sid is not None:
                    self._reply_error(transport, "duplicate HELLO on live session", session_id=sid)
                    raise ProtocolError("duplicate HELLO")
                try:
                    hello = msg.json()
                except ProtocolError as exc:
                    self._reply_error(transport, str(exc))
                    return
                if hello.get("p") != self.p:
                    self._reply_error(transport, f"field mismatch: worker p={self.p}", session_id=msg.session_id)
                    return
                if hello.get("push"):
                    pending = {int(k): v for k, v in hello.get("ops", {}).items()}
                    ops = {}
                    expected_digest = hello.get("digest")
                elif hello.get("digest") != ops_digest(self.ops):
                    self._reply_error(transport, "model digest mismatch", session_id=msg.session_id)
                    return
                sid = msg.session_id
                transport.send(Message.with_json(MsgType.HELLO, {"p": self.p}, session_id=sid))
                continue
            if sid is None or msg.session_id != sid:
                self._reply_error(transport, "no session established", session_id=msg.session_id)
                return
            if msg.msg_type == MsgType.BYE:
                return
            if msg.seq <= last_seq:
                self._reply_error(transport, f"seq {msg.seq} not increasing", session_id=sid)
                return
            last_seq = msg.seq
            if msg.msg_type == MsgType.MODEL_PUSH:
                meta = (pending or {}).get(msg.layer_id)
                if meta is None or msg.dtype != DType.I8:
                    self._reply_error(transport, f"unexpected MODEL_PUSH for op {msg.layer_id}", session_id=sid)
                    return
                w = msg.array().copy()
                ops[msg.layer_id] = OffloadOp(msg.layer_id, msg.layer_id // 8, "", meta["kind"], w, 1.0, meta["stride"], meta["pad"])
                if len(ops) == len(pending) and ops_digest(ops) != expected_digest:
                    self._reply_error(transport, "pushed weights do not match digest", session_id=sid)
                    return
                transport.send(Message.tensor(MsgType.MODEL_PUSH, np.zeros(0, np.uint8), session_id=sid, layer_id=msg.layer_id, seq=msg.seq))
                continue
            if msg.msg_type != MsgType.LINEAR_REQ:
                self._reply_error(transport, f"unexpected message type {msg.msg_type}", session_id=sid)
                return
            if msg.dtype != DType.U32:
                self._reply_error(transport, "LINEAR_REQ must carry u32 residues", session_id=sid, seq=msg.seq)
                continue
            try:
                y = self.compute(msg.layer_id, msg.array(), ops)
            except KeyError:
                self._reply_error(transport, f"no public weights for layer/op id {msg.layer_id}", session_id=sid, layer_id=msg.layer_id, seq=msg.seq)
                continue
            except SliceError as exc:
                self._reply_error(transport, str(exc), session_id=sid, layer_id=msg.layer_id, seq=msg.seq)
                continue
            with self.lock:
                self.served += 1
            transport.send(Message.tensor(MsgType.LINEAR_RESP, y.astype(np.uint32), session_id=sid, layer_id=msg.layer_id, seq=msg.seq))


def worker_serve(transport: Transport, ops: dict[int, OffloadOp], p: int = 2**31 - 1, fault_rate: float = 0.0, seed: int = 0) -> None:
    Worker(ops, p, fault_rate, seed).serve(transport)


def start_in_process_worker(worker: Worker, **kw) -> tuple[QueueTransport, threading.Thread]:
    """Spawn ``worker`` on a thread behind a queue transport; returns the enclave end."""
    enclave_end, worker_end = QueueTransport.pair(**kw)
    t = threading.Thread(target=worker.serve, args=(worker_end,), daemon=True)
    t.start()
    return enclave_end, t


def serve_tcp(worker: Worker, address: str, max_sessions: int | None = None, ready: threading.Event | None = None, bound: list | None = None) -> None:
    """Accept connections, one thread per session."""
    host, port = parse_address(address)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    if bound is not None:
        bound.append(srv.getsockname())
    if ready is not None:
        ready.set()
    threads = []
    try:
        count = 0
        while max_sessions is None or count < max_sessions:
            conn, _ = srv.accept()
            t = threading.Thread(target=worker.serve, args=(TCPTransport(conn, timeout=None),), daemon=True)
            t.start()
            threads.append(t)
            count += 1
        for t in threads:
            t.join()
    finally:
        srv.close()
