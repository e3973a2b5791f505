"""A small numpy-backed tensor type with reverse-mode differentiation.

Every op builds its result eagerly and, when gradients are enabled and some
input requires them, records a closure that maps the output gradient to the
input gradients.  ``backward`` walks the recorded DAG in reverse topological
order.  Shapes must match exactly; the only broadcast supported is adding a
bias vector along the last axis.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, InputError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``seed`` and a stream path.

    Streams are derived by hashing, so ``make_rng(7, "data")`` and
    ``make_rng(7, "train", 3)`` are independent but reproducible.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            words.append(int.from_bytes(hashlib.sha256(part.encode()).digest()[:8], "little"))
        else:
            words.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


_DTYPE_NAMES = {
    np.dtype(np.float32): "F32",
    np.dtype(np.float64): "F64",
    np.dtype(np.int64): "I64",
    np.dtype(np.int8): "Q8",
}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fb" or arr.dtype.kind == "O":
            arr = arr.astype(np.float32, copy=False)
        elif arr.dtype.kind in "iu" and arr.dtype != np.int8:
            arr = arr.astype(np.int64, copy=False)
        if arr.dtype not in _DTYPE_NAMES:
            raise InputError(f"unsupported tensor dtype {arr.dtype}")
        if requires_grad and arr.dtype.kind != "f":
            raise ContractError("integer tensors cannot carry gradients")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.data.size == 1 and self.data.size != 1:
                return scale(self, other)
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.data.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_float(*ts: Tensor) -> None:
    for t in ts:
        if t.data.dtype.kind != "f":
            raise InputError(f"op requires a float tensor, got {t.dtype}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Exact-shape add, or bias add when ``b`` is 1-D over the last axis of ``a``."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))
        return _result(a.data + b.data, (a, b), "bias_add", lambda g: (g, g.sum(axis=axes)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not match")


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 of an (N, C, ...) tensor."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"channel bias {b.shape} does not fit {x.shape}")
    shape = [1] * x.ndim
    shape[1] = b.shape[0]
    axes = tuple(d for d in range(x.ndim) if d != 1)
    return _result(x.data + b.data.reshape(shape), (x, b), "channel_bias", lambda g: (g, g.sum(axis=axes)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not match")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not match")
    return _result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a scalar: a python number or a one-element tensor."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise DimensionError(f"scale: factor must have one element, got {s.shape}")
        sv = s.data.reshape(())
        return _result(
            x.data * sv,
            (x, s),
            "scale",
            lambda g: (g * sv, np.asarray((g * x.data).sum(), dtype=s.data.dtype).reshape(s.shape)),
        )
    sv = np.asarray(s, dtype=x.data.dtype)
    return _result(x.data * sv, (x,), "scale", lambda g: (g * sv,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu", lambda g: (g * mask,))


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def tsum(x: Tensor) -> Tensor:
    return _result(
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        "sum",
        lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),),
    )


def mean(x: Tensor, axis: int | tuple[int, ...]) -> Tensor:
    """Mean over ``axis`` (axes are dropped)."""
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))

    def back(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / np.asarray(count, dtype=x.data.dtype),)

    return _result(x.data.mean(axis=axes).astype(x.data.dtype), (x,), "mean", back)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not ts:
        raise InputError("concat needs at least one tensor")
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(t.ndim) if d != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=axis),
        tuple(ts),
        "concat",
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    _check_float(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _result(a.data @ b.data, (a, b), "matmul", back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), "softmax", back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise InputError("cross entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return ((p * (g / n)).astype(logits.data.dtype),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "softmax_ce", back)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(f"conv: size {size}, kernel {k}, stride {stride}, pad {pad} is not integral")
    return span // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k), rows ordered n, ho, wo.  Works for any dtype."""
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def col2im(cols: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    blocks = cols.reshape(n, ho, wo, c, k, k)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += blocks[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution over (N, C, H, W) input via im2col and a matmul."""
    _check_float(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIkk kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    c_out, c_in, k, k2 = w.shape
    if c_in != c or k != k2:
        raise DimensionError(f"conv2d: input channels {c} vs kernel {w.shape}")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise DimensionError("conv2d: kernel larger than padded input")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    cols = im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gcols.T @ cols).reshape(w.shape)
        gx = col2im(gcols @ wmat, x.shape, k, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(np.ascontiguousarray(out), parents, "conv2d", back)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var, eps: float = 1e-5) -> Tensor:
    """Inference-mode batch norm over axis 1 using frozen running statistics."""
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    inv = (1.0 / np.sqrt(np.asarray(running_var) + eps)).astype(x.data.dtype).reshape(shape)
    mu = np.asarray(running_mean, dtype=x.data.dtype).reshape(shape)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(shape)
    axes = tuple(d for d in range(x.ndim) if d != 1)

    def back(g):
        return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(xhat * g_ + beta.data.reshape(shape), (x, gamma, beta), "batchnorm", back)


# ---------------------------------------------------------------- attention


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on (N, T, d) inputs, heads concatenated."""
    n, t, d = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise DimensionError("attention: q, k, v shapes differ")
    if d % n_heads:
        raise DimensionError(f"attention: d={d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(x):
        return transpose(reshape(x, (n, t, n_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (n, t, d))


def linear_attention(q: Tensor, k: Tensor, v: Tensor, w_score: Tensor, w_out: Tensor) -> Tensor:
    """Attention built only from weight-feature products.

    Per channel, a softmax over tokens of ``Concat(q, k) @ w_score.T`` weights
    the values into one pooled context vector; every token's output is
    ``Concat(context, v_t) @ w_out.T``.  ``w_score`` is (d, 2d), ``w_out`` is
    (d, 2d).  No product of two input-dependent matrices is ever formed, so
    both projections can be offloaded under a one-time pad.
    """
    n, t, d = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise DimensionError("linear attention: q, k, v shapes differ")
    if w_score.shape != (d, 2 * d) or w_out.shape != (d, 2 * d):
        raise DimensionError(f"linear attention: weights must be ({d}, {2 * d})")
    weights = softmax(matmul(concat([q, k], axis=-1), transpose(w_score)), axis=1)
    context = scale(mean(mul(weights, v), axis=1), float(t))
    context = concat([reshape(context, (n, 1, d))] * t, axis=1)
    return matmul(concat([context, v], axis=-1), transpose(w_out))


# ---------------------------------------------------------------- backward + optim


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Leaves listed in ``params`` that are not reachable from ``loss`` receive a
    zero gradient so optimizers can treat every parameter uniformly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0):
    """In-place ``p <- p - lr * (g + weight_decay * p)``; returns ``params``."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    for p, g in zip(params, grads):
        p.data -= np.asarray(lr * (g + weight_decay * p.data), dtype=p.data.dtype)
    return params


class SGD:
    """Momentum SGD; with ``momentum=0`` each step is exactly :func:`sgd_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for p, v in zip(self.params, self._velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.momentum:
                v *= self.momentum
                v += g + self.weight_decay * p.data
                g = v
                grads.append(g)
                p.data -= np.asarray(self.lr * g, dtype=p.data.dtype)
            else:
                grads.append(g)
        if not self.momentum:
            sgd_step(self.params, grads, self.lr, self.weight_decay)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
