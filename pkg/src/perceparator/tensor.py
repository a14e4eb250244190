"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` only when at
least one operand requires a gradient; outside a tape everything runs as
plain numpy with no bookkeeping. ``backward`` walks the tape once, newest
record first.
"""

from __future__ import annotations

import dataclasses
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    InvalidConfig,
    NonFiniteError,
    NonFiniteGradient,
    NonScalarLoss,
    ShapeMismatch,
)

_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64``)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Record:
    op: str
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives; use as a context manager.

    A tape belongs to the thread that entered it and is consumed by a single
    call to :func:`backward`.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.records)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    tapes = _tapes()
    if out.requires_grad and tapes:
        tapes[-1].records.append(Record(op, out, parents, backward))
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result("div", out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _result("log", out, (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g / (2 * out),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2 * g * x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping was active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape ops ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch(f"broadcast_to: {src} to {tuple(shape)}") from None
    return _result("broadcast_to", out, (a,), lambda g: (unbroadcast(g, src),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing only."""
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result("getitem", a.data[index], (a,), back)


def pad_axis(a: Tensor, axis: int, right: int) -> Tensor:
    """Zero-pad ``right`` entries at the end of ``axis``."""
    if right == 0:
        return a
    axis %= a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, right)
    n = a.shape[axis]
    sl = tuple(slice(0, n) if i == axis else slice(None) for i in range(a.ndim))
    return _result("pad", np.pad(a.data, widths), (a,), lambda g: (g[sl],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis %= tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, back)


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# activations ------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    return _result("relu", np.where(pos, x, 0).astype(x.dtype, copy=False), (a,),
                   lambda g: (g * pos,))


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Leaky rectifier with learnable slope, broadcast over the last axis."""
    x, s = a.data, slope.data
    pos = x > 0
    out = np.where(pos, x, s * x).astype(x.dtype, copy=False)

    def back(g):
        gx = np.where(pos, g, g * s) if a.requires_grad else None
        gs = unbroadcast(np.where(pos, 0, g * x), s.shape) if slope.requires_grad else None
        return gx, gs

    return _result("prelu", out, (a, slope), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"softmax axis {axis} invalid for shape {x.shape}")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return _result("softmax", y, (a,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each vector along the last axis, then apply gamma and beta."""
    x = a.data
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeMismatch(
            f"layer_norm: features {f} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(x.ndim - 1))
        gx = None
        if a.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", out, (a, gamma, beta), back)


# convolutions -----------------------------------------------------------------

def _conv_args(stride, padding=0):
    if stride < 1:
        raise InvalidConfig(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise InvalidConfig(f"padding must be >= 0, got {padding}")


def _span(k, n, stride):
    return slice(k, k + stride * (n - 1) + 1, stride)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of x [..., ch_in, T] with w [ch_out, ch_in, K]."""
    _conv_args(stride, padding)
    if w.ndim != 3 or x.ndim < 2 or x.shape[-2] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1d: bias {b.shape} vs weight {w.shape}")
    K = w.shape[2]
    xd = x.data
    if padding:
        xd = np.pad(xd, [(0, 0)] * (xd.ndim - 1) + [(padding, padding)])
    T = xd.shape[-1]
    if T < K:
        raise ShapeMismatch(f"conv1d: padded length {T} shorter than kernel {K}")
    n = (T - K) // stride + 1
    wd = w.data
    out = sum(wd[:, :, k] @ xd[..., _span(k, n, stride)] for k in range(K))
    if b is not None:
        out = out + b.data[:, None]
    lead = tuple(range(xd.ndim - 2))

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xd)
            for k in range(K):
                gxp[..., _span(k, n, stride)] += wd[:, :, k].T @ g
            gx = gxp[..., padding:T - padding] if padding else gxp
        if w.requires_grad:
            gw = np.stack([np.tensordot(g, xd[..., _span(k, n, stride)],
                                        axes=(lead + (g.ndim - 1,), lead + (g.ndim - 1,)))
                           for k in range(K)], axis=-1)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=lead + (g.ndim - 1,))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result("conv1d", out, parents, back)


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d` (zero padding): x [..., ch_in, T], w [ch_in, ch_out, K]."""
    _conv_args(stride)
    if w.ndim != 3 or x.ndim < 2 or x.shape[-2] != w.shape[0]:
        raise ShapeMismatch(f"conv1d_transpose: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"conv1d_transpose: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    K = wd.shape[2]
    n = xd.shape[-1]
    t_out = (n - 1) * stride + K
    out = np.zeros(xd.shape[:-2] + (wd.shape[1], t_out), dtype=np.result_type(xd, wd))
    for k in range(K):
        out[..., _span(k, n, stride)] += wd[:, :, k].T @ xd
    if b is not None:
        out += b.data[:, None]
    lead = tuple(range(xd.ndim - 2))

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = sum(wd[:, :, k] @ g[..., _span(k, n, stride)] for k in range(K))
        if w.requires_grad:
            gw = np.stack([np.tensordot(xd, g[..., _span(k, n, stride)],
                                        axes=(lead + (xd.ndim - 1,), lead + (xd.ndim - 1,)))
                           for k in range(K)], axis=-1)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=lead + (g.ndim - 1,))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result("conv1d_transpose", out, parents, back)


# framing ------------------------------------------------------------------------

def _frame_data(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    r = size // hop
    n_blocks = x.shape[-2] // hop
    n = n_blocks - r + 1
    blocks = x.reshape(x.shape[:-2] + (n_blocks, hop, x.shape[-1]))
    parts = [blocks[..., j:j + n, :, :] for j in range(r)]
    return parts[0].copy() if r == 1 else np.concatenate(parts, axis=-2)


def _fold_data(frames: np.ndarray, hop: int) -> np.ndarray:
    n, size, d = frames.shape[-3:]
    r = size // hop
    lead = frames.shape[:-3]
    blocks = np.zeros(lead + (n + r - 1, hop, d), dtype=frames.dtype)
    for j in range(r):
        blocks[..., j:j + n, :, :] += frames[..., :, j * hop:(j + 1) * hop, :]
    return blocks.reshape(lead + ((n + r - 1) * hop, d))


def _check_frame(size, hop):
    if hop < 1 or size < 1 or size % hop:
        raise InvalidConfig(f"frame size {size} must be a positive multiple of hop {hop}")


def frame(x: Tensor, size: int, hop: int) -> Tensor:
    """Split axis -2 of x [..., T, D] into overlapping windows [..., N, size, D].

    ``T`` must already equal ``hop * (N - 1) + size`` for some N.
    """
    _check_frame(size, hop)
    T = x.shape[-2]
    if T < size or (T - size) % hop:
        raise ShapeMismatch(f"frame: length {T} does not fit size {size}, hop {hop}")
    return _result("frame", _frame_data(x.data, size, hop), (x,),
                   lambda g: (_fold_data(g, hop),))


def fold(frames: Tensor, hop: int) -> Tensor:
    """Sum windows [..., N, size, D] back onto a [..., T, D] timeline (no normalisation)."""
    size = frames.shape[-2]
    _check_frame(size, hop)
    return _result("fold", _fold_data(frames.data, hop), (frames,),
                   lambda g: (_frame_data(g, size, hop),))


# differentiation ----------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaf gradients are overwritten, not accumulated across calls. The tape is
    emptied afterwards.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not tape.records:
        raise ValueError("tape is empty; was the forward pass run inside it?")
    # id -> [tensor, grad, owned]; a grad is copied only when a second contribution arrives
    grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data), True]}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        entry = grads.pop(id(rec.out), None)
        if entry is None:
            continue
        for parent, g in zip(rec.parents, rec.backward(entry[1])):
            if g is None or not parent.requires_grad:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient flowing out of {rec.op}")
            slot = grads.get(id(parent))
            if slot is None:
                grads[id(parent)] = [parent, g, False]
            elif slot[2]:
                slot[1] += g
            else:
                slot[1] = slot[1] + g
                slot[2] = True
    for key, (tensor, g, owned) in grads.items():
        if key not in produced:
            tensor.grad = g if owned and g.dtype == tensor.dtype else np.array(g, dtype=tensor.dtype)
    tape.records.clear()


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# parameter trees ----------------------------------------------------------------

def named_tensors(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor in a dataclass/list tree."""
    if isinstance(obj, Tensor):
        yield prefix.rstrip("."), obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}{f.name}.")
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}{i}.")


def map_tensors(obj: Any, fn: Callable[[Tensor], Tensor]) -> Any:
    """Rebuild a dataclass/list tree with ``fn`` applied to every Tensor."""
    if isinstance(obj, Tensor):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        return dataclasses.replace(obj, **{
            f.name: map_tensors(getattr(obj, f.name), fn)
            for f in dataclasses.fields(obj) if f.init})
    if isinstance(obj, list):
        return [map_tensors(item, fn) for item in obj]
    if isinstance(obj, tuple):
        return tuple(map_tensors(item, fn) for item in obj)
    return obj


# gradient checking --------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_error: float
    worst_input: Any
    worst_index: tuple
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAILED"
        return (f"grad_check {status}: max rel. err {self.max_error:.3e} "
                f"(tol {self.tol:.1e}) at input {self.worst_input!r}, index {self.worst_index}")


def grad_check(f: Callable, inputs, h: float = 1e-5, tol: float = 1e-5,
               seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences in float64.

    ``inputs`` is a sequence of arrays (``f`` is called as ``f(*tensors)``) or a
    mapping of name -> array (``f`` receives the mapping of tensors). Non-scalar
    outputs are contracted with a fixed random cotangent. The per-element error is
    ``|analytic - numeric| / max(1, |analytic|)``; the numeric derivative divides
    by the step actually realised in floating point.
    """
    keyed = isinstance(inputs, Mapping)
    names = list(inputs) if keyed else list(range(len(inputs)))
    arrays = {k: np.array(inputs[k], dtype=np.float64) for k in names}

    def call(tensors):
        return f(tensors) if keyed else f(*(tensors[k] for k in names))

    with default_dtype(np.float64):
        tensors = {k: Tensor(arrays[k], requires_grad=True) for k in names}
        with Tape() as tape:
            out = call(tensors)
        rng = np.random.default_rng(seed)
        cot = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
        with tape:
            loss = tsum(mul(out, Tensor(cot)))
        if tape.records:
            backward(loss, tape)
        analytic = {k: (tensors[k].grad if tensors[k].grad is not None
                        else np.zeros_like(arrays[k])) for k in names}

        def evaluate():
            # copy: view-returning ops would otherwise alias the perturbed input
            return np.array(call({k: Tensor(arrays[k]) for k in names}).data)

        report = GradCheckReport(0.0, None, (), tol)
        for k in names:
            arr = arrays[k]
            errs = np.zeros(arr.shape)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                plus = evaluate()
                xp = arr[idx]
                arr[idx] = orig - h
                minus = evaluate()
                xm = arr[idx]
                arr[idx] = orig
                numeric = float(np.sum(cot * ((plus - minus) / (xp - xm))))
                a = float(analytic[k][idx])
                errs[idx] = abs(a - numeric) / max(1.0, abs(a))
            report.errors[k] = errs
            if errs.size and (report.worst_input is None or errs.max() > report.max_error):
                report.max_error = float(errs.max())
                report.worst_input = k
                report.worst_index = tuple(int(i) for i in np.unravel_index(int(errs.argmax()), errs.shape))
    return report
