"""Small float64 tensor engine with tape-based reverse-mode differentiation.

Only the operations the spotter needs are provided.  Broadcasting is
limited to tensor-vs-scalar; anything else goes through the explicit
:func:`broadcast_to` so shape mistakes fail loudly.

Each op records its parents and a closure mapping the output gradient to
parent gradients.  :meth:`Tensor.backward` orders the recorded graph
topologically and replays it in reverse creation order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MaskspotError

DTYPE = np.float64

_state = threading.local()


class ShapeError(MaskspotError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(MaskspotError, RuntimeError):
    """Engine used outside its contract (e.g. backward on an untaped value)."""


def _next_seq() -> int:
    counter = getattr(_state, "counter", None)
    if counter is None:
        counter = _state.counter = itertools.count()
    return next(counter)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable taping on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name", "seq")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) \
            or data.dtype != DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name
        self.seq = _next_seq()

    # -- basic protocol ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    @property
    def is_taped(self) -> bool:
        return self._backward is not None

    # -- arithmetic sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn,
          op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def tape_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in creation order (ops of one graph share a thread)."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t.seq)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every reachable leaf."""
    if not loss.is_taped:
        raise UsageError("backward() called on a tensor that is not part of a taped graph")
    if grad is None:
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order = tape_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    leaves = []
    for node in reversed(order):
        if node._backward is None:
            leaves.append(node)
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is not None:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# --- elementwise ------------------------------------------------------------

def _binary_operands(a, b) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if a.shape != b.shape:
        if b.size == 1:
            bd = bd.reshape(())
        elif a.size == 1:
            ad = ad.reshape(())
        else:
            raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    return a, b, ad, bd


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b, ad, bd = _binary_operands(a, b)
    return _make(ad + bd, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b, ad, bd = _binary_operands(a, b)
    return _make(ad - bd, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b, ad, bd = _binary_operands(a, b)
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape),
                            _unbroadcast(g * ad, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b, ad, bd = _binary_operands(a, b)
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, a.shape),
                            _unbroadcast(-g * out / bd, b.shape)), "div")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "sigmoid": sigmoid,
                "tanh": tanh, "relu": relu, "exp": exp, "log": log, "square": square}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --- reductions and shape ops -------------------------------------------------

def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the only way operands of different shape meet."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - x.ndim
    expanded = [i for i, (s, t) in enumerate(zip((1,) * lead + x.shape, shape)) if s == 1 and t != 1]

    def bw(g):
        g = g.sum(axis=tuple(expanded), keepdims=True) if expanded else g
        return (g.reshape((1,) * lead + x.shape)[(0,) * lead] if lead else g.reshape(x.shape),)

    return _make(out.copy(), (x,), bw, "broadcast")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis)


def getitem(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), bw, "getitem")


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index list."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (x,), bw, "take")


# --- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine shapes incompatible: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw, "affine")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# --- convolution ------------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """View [C, k, k, Ho, Wo] of a padded input."""
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, ho, wo),
        strides=(s0, s1 * dilation, s2 * dilation, s1 * stride, s2 * stride),
        writeable=False)


def conv_output_size(n: int, k: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of a [C_in, H, W] input with [C_out, C_in, k, k] kernels."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] input and [O,C,k,k] kernels, "
                         f"got {x.shape} and {kernels.shape}")
    c_out, c_in, k, k2 = kernels.shape
    if k != k2:
        raise ShapeError(f"kernels must be square, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernels expect {c_in}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    _, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(np.ascontiguousarray(xp), k, stride, dilation, ho, wo)
    cols2 = cols.reshape(c_in * k * k, ho * wo)
    wmat = kernels.data.reshape(c_out, c_in * k * k)
    out = (wmat @ cols2).reshape(c_out, ho, wo)
    parents: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
        out = out + bias.data[:, None, None]
        parents = (x, kernels, bias)

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        grads: list[np.ndarray | None] = [None, (g2 @ cols2.T).reshape(kernels.shape)]
        if x.requires_grad and stride == 1 and 0 <= padding <= dilation * (k - 1):
            # stride 1: the input gradient is a correlation of the padded output
            # gradient with the spatially flipped, channel-transposed kernels
            q = dilation * (k - 1) - padding
            gp = np.pad(g, ((0, 0), (q, q), (q, q))) if q else np.ascontiguousarray(g)
            gwin = _windows(gp, k, 1, dilation, h, w).reshape(c_out * k * k, h * w)
            wflip = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * k * k)
            grads[0] = (wflip @ gwin).reshape(c_in, h, w)
        elif x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, k, k, ho, wo)
            gxp = np.zeros(xp.shape)
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += gcols[:, i, j]
            grads[0] = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _make(out, parents, bw, "conv2d")


# --- recurrent -------------------------------------------------------------------------

def _sig(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over axis 1 of ``x`` [N, T, In]; returns hidden states [N, T, D].

    Gate order in the 4D weight columns is input, forget, cell, output.
    Zero initial state.
    """
    x, w_in, w_rec, bias = (_as_tensor(t) for t in (x, w_in, w_rec, bias))
    n, t_len, d_in = x.shape
    d = w_rec.shape[0]
    if w_in.shape != (d_in, 4 * d) or w_rec.shape != (d, 4 * d) or bias.shape != (4 * d,):
        raise ShapeError(f"lstm weights {w_in.shape}, {w_rec.shape}, {bias.shape} do not fit "
                         f"input {x.shape} with hidden size {d}")
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    pre = (x.data.reshape(n * t_len, d_in) @ w_in.data).reshape(n, t_len, 4 * d) + bias.data
    hs = np.zeros((n, t_len, d))
    cs = np.zeros((n, t_len, d))
    gates = np.zeros((n, t_len, 4 * d))
    h = np.zeros((n, d))
    c = np.zeros((n, d))
    for t in steps:
        z = pre[:, t] + h @ w_rec.data
        gi, gf, go = _sig(z[:, :d]), _sig(z[:, d:2 * d]), _sig(z[:, 3 * d:])
        gg = np.tanh(z[:, 2 * d:3 * d])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        gates[:, t] = np.concatenate([gi, gf, gg, go], axis=1)
        cs[:, t] = c
        hs[:, t] = h

    def bw(g):
        dz_all = np.zeros((n, t_len, 4 * d))
        dh_next = np.zeros((n, d))
        dc_next = np.zeros((n, d))
        order = list(steps)[::-1]
        for idx, t in enumerate(order):
            prev_t = order[idx + 1] if idx + 1 < len(order) else None
            c_prev = cs[:, prev_t] if prev_t is not None else np.zeros((n, d))
            gi, gf, gg, go = np.split(gates[:, t], 4, axis=1)
            tc = np.tanh(cs[:, t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * go * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * gg * gi * (1.0 - gi),
                dc * c_prev * gf * (1.0 - gf),
                dc * gi * (1.0 - gg * gg),
                dh * tc * go * (1.0 - go),
            ], axis=1)
            dz_all[:, t] = dz
            dh_next = dz @ w_rec.data.T
            dc_next = dc * gf
        dz_flat = dz_all.reshape(n * t_len, 4 * d)
        dx = (dz_flat @ w_in.data.T).reshape(x.shape)
        dw_in = x.data.reshape(n * t_len, d_in).T @ dz_flat
        h_prev = np.zeros((n, t_len, d))
        for idx, t in enumerate(order):
            prev_t = order[idx + 1] if idx + 1 < len(order) else None
            if prev_t is not None:
                h_prev[:, t] = hs[:, prev_t]
        dw_rec = h_prev.reshape(n * t_len, d).T @ dz_flat
        db = dz_flat.sum(axis=0)
        return dx, dw_in, dw_rec, db

    return _make(hs, (x, w_in, w_rec, bias), bw, "lstm")


# --- utilities -------------------------------------------------------------------------

def zeros(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad)


def ones(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad)


def check_finite(named: dict[str, Tensor | np.ndarray]) -> str | None:
    """Name of the first non-finite entry, or None."""
    for name, t in named.items():
        arr = t.data if isinstance(t, Tensor) else t
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None
