"""Dense n-d tensors with reverse-mode autodiff over a recorded tape.

A ``Tensor`` wraps a contiguous numpy array. While a ``Tape`` is active
(``with Tape() as tape:``), every operation whose inputs are tracked appends
one node to the tape; ``backward(tape, loss)`` replays the nodes in reverse
insertion order and accumulates gradients in the tape's gradient store.
Without an active tape the same functions run as plain numpy math, which is
what inference and finite-difference probing use.

Layout conventions: images and feature maps are channels-last (H x W x C),
with an optional leading batch axis (N x H x W x C) accepted by the spatial
ops. All math is float32 or float64; gradient checking is done at float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or axes/extents) do not satisfy an op's contract."""


class TapeError(RuntimeError):
    """Invalid interaction with the gradient tape."""


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense real array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "_tape", "_tape_id", "_produced")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None
        self._tape_id: int | None = None
        self._produced = False  # True if this tensor is the output of a recorded op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape_id(self) -> int | None:
        return self._tape_id

    def detach(self) -> "Tensor":
        """A view of the same values with no tape participation."""
        return Tensor(self.data.copy(), requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- sugar; every operator delegates to the module-level ops -------------
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("op", "out_id", "input_ids", "backward")

    def __init__(self, op: str, out_id: int, input_ids: tuple[int, ...],
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.out_id = out_id
        self.input_ids = input_ids
        self.backward = backward


class Tape:
    """Append-only record of operations; confined to one thread.

    Node order is the insertion order, which is topological by construction;
    the backward pass walks it once, in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()
        return False

    def register(self, t: Tensor) -> int:
        """Assign this tensor a handle on this tape (idempotent)."""
        if t._tape is self and t._tape_id is not None:
            return t._tape_id
        t._tape = self
        t._tape_id = self._next_id
        t._produced = False
        self._next_id += 1
        return t._tape_id

    def tracked(self, t: Tensor) -> bool:
        return t.requires_grad or (t._tape is self and t._produced)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        ids = tuple(self.register(t) for t in inputs)
        out_id = self.register(out)
        out._produced = True
        self.nodes.append(_Node(op, out_id, ids, backward))

    def grad(self, t: Tensor) -> np.ndarray:
        """Accumulated gradient for a tensor recorded on this tape."""
        if t._tape is not self or t._tape_id is None:
            raise TapeError("tensor is not recorded on this tape (detached)")
        g = self.grads.get(t._tape_id)
        if g is None:
            raise TapeError("no gradient was accumulated for this tensor")
        return g

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse pass from a scalar loss; returns the gradient store.

    Gradients of tensors used more than once accumulate by summation. Every
    node is visited exactly once, in reverse insertion order.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape or loss._tape_id is None:
        raise TapeError("loss was not recorded on this tape")
    store = tape.grads
    store.clear()
    store[loss._tape_id] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g_out = store.get(node.out_id)
        if g_out is None:
            continue
        for tid, g in zip(node.input_ids, node.backward(g_out)):
            if g is None:
                continue
            acc = store.get(tid)
            store[tid] = g if acc is None else acc + g
    return store


def _maybe_record(op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(tape.tracked(t) for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of trailing-axes broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # b may broadcast over the trailing axes of a; the result keeps a's shape
    if a.shape == b.shape:
        return
    if b.ndim > a.ndim:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")
    for na, nb in zip(reversed(a.shape), reversed(b.shape)):
        if nb != 1 and nb != na:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    bshape = b.shape

    def bwd(g):
        return g, _unbroadcast(g, bshape)

    return _maybe_record("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    bshape = b.shape

    def bwd(g):
        return g, _unbroadcast(-g, bshape)

    return _maybe_record("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, _unbroadcast(g * ad, bd.shape)

    return _maybe_record("mul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _maybe_record("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops (accept H x W x C, or batched N x H x W x C)
# ---------------------------------------------------------------------------

def _as_batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op} expects HxWxC or NxHxWxC input, got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded cross-correlation: kernels kh x kw x Cin x Cout, bias Cout."""
    xd, squeeze = _as_batched(x, "conv2d")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be kh x kw x Cin x Cout, got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {xd.shape[3]} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    n, h, w, _ = xd.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((n, h + 2 * ph, w + 2 * pw, cin), dtype=xd.dtype)
    padded[:, ph:ph + h, pw:pw + w, :] = xd
    # (n, h, w, c, kh, kw) flattened in natural order; the kernel matrix is
    # transposed to the matching (c, kh, kw) row layout instead (it is small)
    cols = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    cols = cols.reshape(n * h * w, cin * kh * kw)
    kmat = kernels.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    y = (cols @ kmat + bias.data).reshape(n, h, w, cout)
    out = Tensor(y[0] if squeeze else y)

    def bwd(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(n * h * w, cout)
        dk = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        db = g2.sum(axis=0)
        dcols = (g2 @ kmat.T).reshape(n, h, w, cin, kh, kw)
        dpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                dpad[:, i:i + h, j:j + w, :] += dcols[:, :, :, :, i, j]
        dx = dpad[:, ph:ph + h, pw:pw + w, :]
        return (dx[0] if squeeze else dx), np.ascontiguousarray(dk), db

    return _maybe_record("conv2d", out, (x, kernels, bias), bwd)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pool; gradient goes to each window's first
    maximum in row-major order."""
    xd, squeeze = _as_batched(x, "maxpool2d")
    n, h, w, c = xd.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial extents {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = xd.reshape(n, ho, k, wo, k, c)
    y = win.max(axis=(2, 4))
    out = Tensor(y[0] if squeeze else y)

    def bwd(g):
        g4 = g[None] if squeeze else g
        # first max in row-major order wins ties; argmax is deferred to here
        flat = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
        idx = np.argmax(flat, axis=-1)
        dwin = np.zeros_like(flat)
        np.put_along_axis(dwin, idx[..., None], g4[..., None], axis=-1)
        dx = dwin.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (dx[0] if squeeze else dx,)

    return _maybe_record("maxpool2d", out, (x,), bwd)


def avgpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pool with a square window."""
    if window == 1:
        return x
    xd, squeeze = _as_batched(x, "avgpool2d")
    n, h, w, c = xd.shape
    if h % window or w % window:
        raise ShapeError(f"avgpool2d: spatial extents {h}x{w} not divisible by {window}")
    ho, wo = h // window, w // window
    y = xd.reshape(n, ho, window, wo, window, c).mean(axis=(2, 4))
    out = Tensor(y[0] if squeeze else y)
    inv = 1.0 / (window * window)

    def bwd(g):
        g4 = g[None] if squeeze else g
        dx = np.broadcast_to((g4 * inv)[:, :, None, :, None, :], (n, ho, window, wo, window, c))
        dx = dx.reshape(n, h, w, c)
        return (dx[0] if squeeze else dx,)

    return _maybe_record("avgpool2d", out, (x,), bwd)


# ---------------------------------------------------------------------------
# activations and pointwise transcendentals
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _maybe_record("relu", out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _maybe_record("tanh", out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g * y,)

    return _maybe_record("exp", out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive input")
    out = Tensor(np.log(x.data))
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _maybe_record("log", out, (x,), bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, computed with max subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _maybe_record("softmax", out, (x,), bwd)


def activation(kind: str, x: Tensor, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation kind: {kind!r}")


# ---------------------------------------------------------------------------
# shape and reduction ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    out = Tensor(x.data.reshape(shape))
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _maybe_record("reshape", out, (x,), bwd)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))
    shape = x.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _maybe_record("sum", out, (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))
    shape = x.shape
    inv = 1.0 / count

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _maybe_record("mean", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _maybe_record("concat", out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# losses built from the primitives
# ---------------------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # the max shift is a constant w.r.t. the gradient; softmax is shift-invariant
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, shift)
    lse = log(reduce_sum(exp(z), axis=axis, keepdims=True))
    return sub(z, lse)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label]; logits (M,) or (N, M)."""
    single = logits.ndim == 1
    lg = reshape(logits, (1, -1)) if single else logits
    n, m = lg.shape
    idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if idx.shape != (n,):
        raise ShapeError(f"labels shape {idx.shape} does not match batch {n}")
    if np.any(idx < 0) or np.any(idx >= m):
        raise ValueError(f"label out of range [0, {m})")
    onehot = np.zeros((n, m), dtype=lg.dtype)
    onehot[np.arange(n), idx] = 1.0
    picked = mul(log_softmax(lg, axis=-1), Tensor(onehot))
    return mul(reduce_sum(picked), Tensor(np.asarray(-1.0 / n, dtype=lg.dtype)))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[], float], arrays: Sequence[np.ndarray],
                      eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f()`` w.r.t. each array, in place.

    Perturbs every entry of every array by +/- eps; independent of the tape.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients (where central differences are pure
    roundoff) from dominating; any real sign or magnitude bug still blows
    far past 1e-4.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
