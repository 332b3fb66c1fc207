"""Reverse-mode automatic differentiation on numpy buffers.

Tape-based engine: every tracked operation appends a node holding its
input nodes and a backward closure. Backward closures are written in
terms of the public ops themselves, so running :func:`backward` with
``create_higher_order=True`` records the gradient computation on the same
tape and a second backward pass through the returned gradients is exact.
This is what lets the meta-learners differentiate through their own inner
gradient updates.

Conventions:
  - dtypes are float32 or float64, fixed per tensor; binary ops require
    matching dtypes.
  - broadcasting follows numpy's trailing-dimension rules.
  - a graph and its tensors belong to one thread; independent graphs may
    run on separate threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class GraphError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, untracked or unreachable tensor."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf while debug checks were enabled."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.seq = 0


_state = _State()
_debug_nan = False


def set_debug_nan(enabled: bool) -> None:
    """Globally enable per-op NaN/Inf validation (slow; meant for tests)."""
    global _debug_nan
    _debug_nan = bool(enabled)


@contextmanager
def debug_nan_checks(enabled: bool = True):
    global _debug_nan
    prev = _debug_nan
    _debug_nan = bool(enabled)
    try:
        yield
    finally:
        _debug_nan = prev


@contextmanager
def no_grad():
    """Suspend graph recording; ops inside produce untracked tensors."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _grad_enabled():
    prev = _state.grad_enabled
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded operation: links to input nodes plus a backward closure."""

    __slots__ = ("seq", "inputs", "backward_fn", "op")

    def __init__(self, inputs, backward_fn, op: str):
        self.seq = _state.seq
        _state.seq += 1
        self.inputs = inputs          # tuple[Node | None], aligned with parents
        self.backward_fn = backward_fn  # None for leaves
        self.op = op


class Tensor:
    """n-d numeric array, optionally attached to the differentiation graph."""

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: Node | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad_tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, None)

    def __repr__(self):
        tag = " tracked" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; scalars are lifted to constants of matching dtype.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _ALLOWED_DTYPES:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return arr


def tensor(data, dtype=np.float32, track: bool = False) -> Tensor:
    """Create a tensor; ``track=True`` makes it a graph leaf (a parameter)."""
    arr = _as_array(data, dtype)
    node = Node((), None, "leaf") if track and _state.grad_enabled else None
    return Tensor(arr, node)


def parameter(data, dtype=np.float32) -> Tensor:
    return tensor(data, dtype, track=True)


def constant(data, dtype=np.float32) -> Tensor:
    return tensor(data, dtype, track=False)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _lift2(a, b) -> tuple[Tensor, Tensor]:
    """Lift python scalars on either side of a binary op."""
    if isinstance(a, Tensor):
        return a, _lift(b, a.dtype)
    if isinstance(b, Tensor):
        return _lift(a, b.dtype), b
    raise TypeError("binary op needs at least one Tensor operand")


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _debug_nan and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    if _state.grad_enabled and any(p.node is not None for p in parents):
        node = Node(tuple(p.node for p in parents), backward_fn, op)
        return Tensor(data, node)
    return Tensor(data, None)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (adjoint of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = sum_axes(g, axes=tuple(range(extra)), keepdims=False)
    kept = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if kept:
        g = sum_axes(g, axes=kept, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _check_same_dtype(a, b, "add")
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _check_same_dtype(a, b, "sub")
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _check_same_dtype(a, b, "mul")
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bw(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        return (neg(g),)

    return _make(-a.data, (a,), bw, "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (not differentiated w.r.t. ``c``)."""
    c = float(c)

    def bw(g):
        return (scale(g, c),)

    return _make(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.data.dtype)

    def bw(g):
        return (mul(g, Tensor(mask)),)

    return _make(np.maximum(a.data, 0), (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    result: Tensor | None = None

    def bw(g):
        o = result
        return (mul(g, mul(o, sub(1.0, o))),)

    result = _make(out, (a,), bw, "sigmoid")
    return result


def exp(a: Tensor) -> Tensor:
    result: Tensor | None = None

    def bw(g):
        return (mul(g, result),)

    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    result = _make(data, (a,), bw, "exp")
    return result


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (mul(g, pow_const(a, -1.0)),)

    # out-of-domain values surface through the NaN debug check, not warnings
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), bw, "log")


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g):
        return (mul(g, scale(pow_const(a, p - 1.0), p)),)

    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.power(a.data, a.data.dtype.type(p))
    return _make(data, (a,), bw, "pow_const")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def bw(g):
        return (reshape(g, old),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (permute(g, inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "permute")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected rank 2, got shape {a.shape}")
    return permute(a, (1, 0))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def bw(g):
        return (_unbroadcast(g, old),)

    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(data, (a,), bw, "broadcast_to")


def sum_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is not None:
        axes = tuple(int(x) for x in axes)
    in_shape = a.shape

    def bw(g):
        if axes is None:
            return (broadcast_to(reshape(g, (1,) * len(in_shape)), in_shape),)
        if not keepdims:
            kd = list(in_shape)
            for ax in axes:
                kd[ax] = 1
            g = reshape(g, kd)
        return (broadcast_to(g, in_shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum_axes")


def mean_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        count = a.size
    else:
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return scale(sum_axes(a, axes, keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValueError("concat: dtype mismatch")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1]))
            for i in range(len(sizes))
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), bw, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    in_shape = a.shape
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)

    def bw(g):
        return (_embed_slice(g, in_shape, axis, start),)

    return _make(np.ascontiguousarray(a.data[tuple(sl)]), (a,), bw, "slice_axis")


def _embed_slice(g: Tensor, out_shape: tuple, axis: int, start: int) -> Tensor:
    """Adjoint of slice_axis: place ``g`` into zeros of ``out_shape``."""
    stop = start + g.shape[axis]

    def bw(gg):
        return (slice_axis(gg, axis, start, stop),)

    data = np.zeros(out_shape, dtype=g.data.dtype)
    sl = [slice(None)] * len(out_shape)
    sl[axis] = slice(start, stop)
    data[tuple(sl)] = g.data
    return _make(data, (g,), bw, "embed_slice")


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected rank-2 operands, got {a.shape} and {b.shape}")
    _check_same_dtype(a, b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")

    def bw(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# convolution plumbing: im2col / col2im adjoint pair

_COL_CACHE: dict[tuple, tuple] = {}


def _conv_geometry(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def im2col(a: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    """Extract conv patches: [N, C, H, W] -> [N, C*kh*kw, oh*ow].

    Patch elements are laid out channel-major, then kernel row-major, so a
    reshaped [O, C*kh*kw] weight matrix multiplies columns directly.
    """
    if a.data.ndim != 4:
        raise ValueError(f"im2col: expected NCHW input, got {a.shape}")
    n, c, h, w = a.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"im2col: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    in_shape = a.shape

    def bw(g):
        return (col2im(g, in_shape, kh, kw, stride, padding),)

    data = _im2col_data(a.data, kh, kw, stride, padding)
    return _make(data, (a,), bw, "im2col")


def _im2col_data(x: np.ndarray, kh, kw, stride, padding) -> np.ndarray:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]          # [N, C, oh, ow, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3)             # [N, C, kh, kw, oh, ow]
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)


def col2im(cols: Tensor, in_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    """Adjoint of im2col: scatter-add patch columns back to [N, C, H, W]."""

    def bw(g):
        return (im2col(g, kh, kw, stride, padding),)

    data = _col2im_data(cols.data, in_shape, kh, kw, stride, padding)
    return _make(data, (cols,), bw, "col2im")


def _col2im_data(cols: np.ndarray, in_shape, kh, kw, stride, padding) -> np.ndarray:
    n, c, h, w = in_shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride] += cols6[:, :, di, dj]
    if padding:
        out = out[:, :, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(out)


def conv2d(a: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation), NCHW input and OIHW weight."""
    if a.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d: input must be NCHW and weight OIHW")
    n, c, h, w = a.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input channels {c} != weight input channels {ci}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w}")

    cols = im2col(a, kh, kw, stride, padding)                    # [N, CKK, L]
    ckk, ell = c * kh * kw, oh * ow
    flat = reshape(permute(cols, (1, 0, 2)), (ckk, n * ell))     # [CKK, N*L]
    prod = matmul(reshape(weight, (o, ckk)), flat)               # [O, N*L]
    out = permute(reshape(prod, (o, n, ell)), (1, 0, 2))         # [N, O, L]
    out = reshape(out, (n, o, oh, ow))
    return add(out, reshape(bias, (1, o, 1, 1)))


# ---------------------------------------------------------------------------
# max pooling: gather/scatter adjoint pair over fixed argmax indices


def maxpool2d(a: Tensor, k: int, stride: int) -> Tensor:
    """Window-wise max over kxk windows; ties resolve to the first element
    in row-major window order."""
    if a.data.ndim != 4:
        raise ValueError(f"maxpool2d: expected NCHW input, got {a.shape}")
    n, c, h, w = a.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d: window {k} exceeds input {h}x{w}")
    oh, ow = _conv_geometry(h, w, k, k, stride, 0)
    x4 = a.data.reshape(n * c, 1, h, w)
    cols = _im2col_data(x4, k, k, stride, 0)          # [N*C, k*k, L]
    idx = np.argmax(cols, axis=1)                     # first occurrence on ties
    # window element -> flat input position
    di, dj = idx // k, idx % k
    ell = oh * ow
    grid_i = (np.arange(ell) // ow) * stride
    grid_j = (np.arange(ell) % ow) * stride
    pos = ((grid_i[None, :] + di) * w + (grid_j[None, :] + dj)).astype(np.int64)  # [N*C, L]
    out = _flat_gather(a, pos, (n, c, h, w))
    return reshape(out, (n, c, oh, ow))


def _flat_gather(a: Tensor, pos: np.ndarray, in_shape: tuple) -> Tensor:
    """Gather per-image flat spatial positions: linear in ``a`` for fixed pos."""
    n, c, h, w = in_shape

    def bw(g):
        return (_flat_scatter(g, pos, in_shape),)

    flat = a.data.reshape(n * c, h * w)
    data = np.take_along_axis(flat, pos, axis=1)
    return _make(data, (a,), bw, "flat_gather")


def _flat_scatter(g: Tensor, pos: np.ndarray, in_shape: tuple) -> Tensor:
    n, c, h, w = in_shape

    def bw(gg):
        return (_flat_gather(gg, pos, in_shape),)

    out = np.zeros((n * c, h * w), dtype=g.data.dtype)
    rows = np.repeat(np.arange(n * c), pos.shape[1])
    np.add.at(out, (rows, pos.ravel()), g.data.ravel())
    return _make(out.reshape(in_shape), (g,), bw, "flat_scatter")


# ---------------------------------------------------------------------------
# normalization and losses


def batchnorm2d(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization from current-batch statistics only,
    differentiable through the mean and variance."""
    if a.data.ndim != 4:
        raise ValueError(f"batchnorm2d: expected NCHW input, got {a.shape}")
    n, c, h, w = a.shape
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    if n * h * w < 2:
        raise ValueError("batchnorm2d: need at least 2 values per channel")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    m = mean_axes(a, (0, 2, 3), keepdims=True)
    xc = sub(a, m)
    var = mean_axes(mul(xc, xc), (0, 2, 3), keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    norm = mul(xc, inv)
    return add(mul(norm, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


def _check_one_hot(t: np.ndarray) -> None:
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise ValueError("target rows must be one-hot")


def softmax_xent_temperature(logits: Tensor, target_onehot, T: float) -> Tensor:
    """Mean cross-entropy of softmax(logits / T) against one-hot targets.

    Computed via the max-shifted log-sum-exp, so large logits and extreme
    temperatures stay finite.
    """
    if T <= 0:
        raise ValueError("temperature must be positive")
    t = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot)
    if logits.data.ndim != 2 or t.shape != logits.shape:
        raise ValueError(f"logits {logits.shape} and target {t.shape} must be matching rank-2")
    if logits.shape[1] < 2:
        raise ValueError("need at least 2 classes")
    _check_one_hot(t)
    b = logits.shape[0]
    z = scale(logits, 1.0 / T)
    shift = Tensor(np.max(z.data, axis=1, keepdims=True))  # constant; lse is shift-invariant
    zs = sub(z, shift)
    lse = log(sum_axes(exp(zs), (1,), keepdims=True))      # [B, 1]
    picked = sum_axes(mul(zs, Tensor(t.astype(z.data.dtype))), (1,), keepdims=True)
    return scale(sum_axes(sub(lse, picked)), 1.0 / b)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Sum of squared differences over all elements (no averaging)."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    if t.shape != pred.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    d = sub(pred, t)
    return sum_axes(mul(d, d))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, wrt: Iterable[Tensor], create_higher_order: bool = False) -> dict:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Returns a mapping keyed by tensor identity. With ``create_higher_order``
    the returned gradients are themselves graph-connected, so a further
    backward through them is valid.
    """
    if loss.node is None:
        raise GraphError("loss is not attached to the graph")
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    for t in wrt:
        if t.node is None:
            raise GraphError("a requested tensor is not tracked")

    visited = {loss.node}
    stack = [loss.node]
    while stack:
        nd = stack.pop()
        for p in nd.inputs:
            if p is not None and p not in visited:
                visited.add(p)
                stack.append(p)
    for t in wrt:
        if t.node not in visited:
            raise GraphError("a requested tensor is not reachable from the loss")

    order = sorted(visited, key=lambda nd: nd.seq, reverse=True)
    grads: dict[Node, Tensor] = {loss.node: Tensor(np.ones_like(loss.data))}
    ctx = _grad_enabled() if create_higher_order else no_grad()
    with ctx:
        for nd in order:
            g = grads.get(nd)
            if g is None or nd.backward_fn is None:
                continue
            parts = nd.backward_fn(g)
            for parent, part in zip(nd.inputs, parts):
                if parent is None or part is None:
                    continue
                held = grads.get(parent)
                grads[parent] = part if held is None else add(held, part)

    out: dict[Tensor, Tensor] = {}
    for t in wrt:
        g = grads.get(t.node)
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out[t] = g
    return out


def apply_update(params, grads: Mapping, lr: float, differentiable: bool):
    """One gradient step ``p - lr * g`` over a named parameter collection.

    ``params`` is any object with ``items() -> (name, Tensor)`` and
    ``replace_tensors(mapping)`` (see models.ParamSet). With
    ``differentiable=True`` the subtraction is recorded, so outer gradients
    flow through the update; otherwise the result is a set of fresh leaves.
    """
    new: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(p)
        if g is None:
            raise KeyError(f"missing gradient for parameter '{name}'")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if differentiable:
            new[name] = sub(p, scale(g, lr))
        else:
            new[name] = parameter(p.data - p.data.dtype.type(lr) * g.data, dtype=p.data.dtype)
    return params.replace_tensors(new)


def finite_diff_grad(f: Callable[[], float], params: Iterable[Tensor], h: float = 1e-5) -> dict:
    """Central-difference gradient oracle: perturbs each coordinate in place.

    ``f`` must be deterministic and read the current values of ``params``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    # no no_grad here: the objective may itself differentiate (adapted losses)
    out: dict[Tensor, Tensor] = {}
    for t in params:
        grad = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = float(f())
            t.data[idx] = orig - h
            fm = float(f())
            t.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("objective non-finite at finite-difference probe")
            grad[idx] = (fp - fm) / (2.0 * h)
            it.iternext()
        out[t] = Tensor(grad)
    return out
