"""Minimal reverse-mode tensor engine on a numpy backend.

Operations run eagerly. When a :class:`Graph` is active (``with Graph() as g``)
and any input requires a gradient, the operation appends a node to the graph;
``g.backward(loss)`` then walks the nodes in reverse execution order.
Outside a graph nothing is recorded, which is what inference uses.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "segkit_active_graph", default=None
)


_gate_state: contextvars.ContextVar["GateRecorder | None"] = contextvars.ContextVar(
    "segkit_gate_state", default=None
)


class ShapeError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float32)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Records operations executed while it is the active graph."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt=()) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reached.

        Tensors in ``wrt`` that the loss does not depend on get an explicit zero
        gradient. Returns the leaf gradients of this call. The recorded nodes are
        released afterwards, so a second call without a new forward pass is an error.
        """
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        end = None
        for i in range(len(self.nodes) - 1, -1, -1):
            if self.nodes[i].output is loss:
                end = i
                break
        if end is None:
            raise GraphStateError("backward() called before a forward pass produced this loss in the graph")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.output) for n in self.nodes[: end + 1]}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: end + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        for t in wrt:
            if id(t) not in leaves:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                out[t] = np.zeros_like(t.data)
        self.nodes.clear()
        return out


def _record(op, inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data)
    graph = _active_graph.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record("clip", (a,), np.clip(ad, lo, hi), lambda g: (g * inside,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), a.data.sum(keepdims=False).reshape(()),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record("mean", (a,), np.asarray(a.data.mean(), dtype=a.dtype),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _record("getitem", (a,), a.data[idx].copy(), backward)


# ---------------------------------------------------------------- gate freezing

class GateRecorder:
    """Records, then replays, the on/off pattern of relu and the max-pool argmaxes.

    Used by finite-difference checks: with the pattern frozen, the network is a
    smooth function of its parameters near the recorded point, and its
    derivative there equals the true gradient whenever no pre-activation sits
    exactly on a kink.
    """

    def __init__(self):
        self.gates: list[np.ndarray] = []
        self.replaying = False
        self._cursor = 0
        self._token = None

    def record(self):
        self.gates.clear()
        self.replaying = False
        return self

    def replay(self):
        self.replaying = True
        self._cursor = 0
        return self

    def __enter__(self):
        self._token = _gate_state.set(self)
        return self

    def __exit__(self, *exc):
        _gate_state.reset(self._token)
        if self.replaying and self._cursor != len(self.gates) and exc[0] is None:
            raise GraphStateError("replayed forward pass used a different number of gates")

    def gate(self, fresh: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.gates.append(fresh)
            return fresh
        stored = self.gates[self._cursor]
        self._cursor += 1
        if stored.shape != fresh.shape:
            raise GraphStateError("gate shape changed between record and replay")
        return stored


def _gate(fresh: np.ndarray) -> np.ndarray:
    rec = _gate_state.get()
    return fresh if rec is None else rec.gate(fresh)


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    xd = x.data
    on = _gate(xd > 0)
    return _record("relu", (x,), xd * on, lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    # keep saturated outputs strictly inside (0, 1)
    fi = np.finfo(out.dtype)
    out = np.clip(out, fi.tiny, 1 - fi.epsneg)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- convolution

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _scatter_windows(out: np.ndarray, cols: np.ndarray, k: int, stride: int, h: int, w: int):
    # cols: N,h,w,C,k,k added into out: N,C,(h-1)*stride+k,...
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {h}x{wd} (pad {pad})")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    xp = _pad(x.data, pad)
    cols = _windows(xp, k, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(f, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        _scatter_windows(dxp, dcols, k, stride, ho, wo)
        dx = dxp[:, :, pad : hp - pad, pad : wp - pad] if pad else dxp
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, np.ascontiguousarray(out), backward)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Kernel layout is C_in x C_out x k x k; output extent (H-1)*stride + k - 2*pad."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cw, f, k, _ = w.shape
    if cw != c:
        raise ShapeError(f"transposed_conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise ShapeError("padding removes the whole output")
    xmat = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    wmat = w.data.reshape(c, f * k * k)
    cols = (xmat @ wmat).reshape(n, h, wd, f, k, k)
    full = np.zeros((n, f, hf, wf), dtype=np.result_type(x.data, w.data))
    _scatter_windows(full, cols, k, stride, h, wd)
    out = full[:, :, pad : hf - pad, pad : wf - pad] if pad else full
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gfull = _pad(g, pad)
        gcols = _windows(gfull, k, stride, h, wd).transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, f * k * k)
        dx = (gcols @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        dw = (xmat.T @ gcols).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(dx), dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return _record("transposed_conv2d", inputs, np.ascontiguousarray(out), backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None, return_indices: bool = False):
    """Max over k x k windows. Ties go to the first position in row-major order.

    With ``return_indices`` the flat (row * W + col) argmax of every window is
    returned alongside the pooled tensor.
    """
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} larger than input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = _windows(x.data, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    am = _gate(win.argmax(axis=-1))
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + am // k
    cols = np.arange(wo)[None, :] * stride + am % k
    flat_hw = rows * w + cols

    def backward(g):
        base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
        dx = np.bincount((base + flat_hw).ravel(), weights=g.ravel(), minlength=n * c * h * w)
        return (dx.reshape(n, c, h, w).astype(g.dtype, copy=False),)

    out_t = _record("maxpool2d", (x,), np.ascontiguousarray(out), backward)
    return (out_t, flat_hw) if return_indices else out_t


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm. In training mode the running stats are updated in place."""
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters must have length {c}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = (xd - mu.astype(xd.dtype).reshape(1, c, 1, 1)) * inv_std
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            m = n * h * w
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _record("batchnorm2d", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------- merges

def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat needs equal N,H,W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _record("concat", (a, b), np.concatenate([a.data, b.data], axis=1),
                   lambda g: (g[:, :ca], g[:, ca:]))


def merge(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "concat_channels":
        return concat(a, b)
    if kind == "add":
        if a.shape != b.shape:
            raise ShapeError(f"add merge needs identical shapes: {a.shape} vs {b.shape}")
        return add(a, b)
    raise ValueError(f"unknown merge kind {kind!r}")
