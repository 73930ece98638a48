"""Dense arrays with a recording tape and exact reverse-mode gradients.

Values live in :class:`Tensor` objects backed by contiguous numpy arrays.
Operations executed while a :class:`GradientTape` is active and whose inputs
require gradients are appended to that tape; :func:`backward` replays the
tape in reverse to accumulate gradients.

Every forward operation checks its output for NaN/Inf and raises
:class:`~mixcaps.errors.NumericError` instead of propagating them.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from mixcaps import kernels
from mixcaps.errors import ContractError, DimensionError, NumericError

_default_dtype = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch newly created tensors between 64-bit (default) and 32-bit floats."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    """An n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=True, name=name)


class GradientTape:
    """Ordered record of operations executed inside its ``with`` block."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None):
        return backward(self, loss, params)


def current_tape() -> GradientTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Gradients(dict):
    """Mapping ``Tensor -> ndarray`` (keyed by identity)."""

    def __missing__(self, key):
        raise KeyError(getattr(key, "name", None) or repr(key))


def backward(tape: GradientTape, loss: Tensor, params: Iterable[Tensor] | None = None) -> Gradients:
    """Replay ``tape`` in reverse from the scalar ``loss``.

    If ``params`` is given, the result holds an entry for each of them, with
    exact zeros for parameters that never touched the loss.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = Gradients()
    if params is None:
        seen = {}
        for _, inputs, _ in tape.records:
            for t in inputs:
                if t.requires_grad and id(t) in grads:
                    seen[id(t)] = t
        for key, t in seen.items():
            result[t] = grads[key]
    else:
        for p in params:
            g = grads.get(id(p))
            result[p] = np.zeros_like(p.data) if g is None else g
    return result


def _check_finite(arr: np.ndarray, op: str) -> None:
    total = arr.sum() if arr.size else 0.0
    if np.isfinite(total):
        return
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value in output of shape {arr.shape}")


def apply(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` as the result of ``op`` and record it on the active tape.

    ``backward_fn`` maps the output gradient to a tuple with one entry per input
    (``None`` where no gradient is needed).
    """
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = current_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return apply("neg", -a.data, (a,), lambda g: (-g,))


class watch_kinks:
    """Collect the activation pattern of every ReLU evaluated inside the block.

    Finite differences are only meaningful when a perturbation leaves this
    pattern unchanged.
    """

    def __enter__(self):
        self.masks = []
        stack = getattr(_local, "kink_watchers", None)
        if stack is None:
            stack = _local.kink_watchers = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.kink_watchers.pop()
        return False

    def signature(self) -> bytes:
        return b"".join(np.packbits(m).tobytes() for m in self.masks)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    for w in getattr(_local, "kink_watchers", ()):
        w.masks.append(mask)
    return apply("relu", a.data * mask, (a,), lambda g: (g * mask,))


# reductions and shape ------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return apply("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    s = sum_(a, axis)
    return mul(s, 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc
    return apply("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return apply("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b`` for 2-D operands (leading batch axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply("matmul", out, (a, b), bw)


def conv2d(x, filters, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``(N,)H,W,C_in`` with ``k,k,C_in,C_out`` filters."""
    x, filters = as_tensor(x), as_tensor(filters)
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or filters.ndim != 4:
        raise DimensionError(f"conv2d expects (N,)H,W,C input and k,k,Cin,Cout filters, got {x.shape} and {filters.shape}")
    k, k2, cin, cout = filters.shape
    n, h, w, c = xd.shape
    if k != k2:
        raise DimensionError(f"conv2d filters must be square, got {filters.shape}")
    if c != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs filters {filters.shape}")
    if k > h or k > w:
        raise DimensionError(f"conv2d kernel {k} larger than input {x.shape}")
    cols = kernels.im2col(xd, k, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    flat = cols.reshape(n * ho * wo, k * k * cin)
    wmat = filters.data.reshape(k * k * cin, cout)
    out = (flat @ wmat).reshape(n, ho, wo, cout)
    if squeeze:
        out = out[0]

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = None
        if filters.requires_grad:
            gw = (flat.T @ g2).reshape(filters.shape)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
            gx = kernels.col2im(gcols, (n, h, w, c), k, stride)
            if squeeze:
                gx = gx[0]
        return gx, gw

    return apply("conv2d", out, (x, filters), bw)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling of ``(N,)H,W,C`` by ``factor`` (H, W divisible)."""
    if factor == 1:
        return x
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, h, w, c = xd.shape
    if h % factor or w % factor:
        raise DimensionError(f"pool factor {factor} does not divide input {x.shape}")
    out = xd.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gx = np.repeat(np.repeat(gd, factor, axis=1), factor, axis=2) / (factor * factor)
        return (gx[0] if squeeze else gx,)

    return apply("avg_pool2d", out, (x,), bw)


# normalisers ----------------------------------------------------------------

def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if not np.isfinite(logits.data).all():
        raise NumericError("softmax: non-finite logits")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return apply("softmax", p, (logits,), bw)


def squash(s, axis: int = -1, eps: float = kernels.SQUASH_EPS) -> Tensor:
    """Rescale vectors along ``axis`` to length ``|s|^2/(1+|s|^2)``, keeping direction."""
    s = as_tensor(s)
    sd = np.moveaxis(s.data, axis, -1)
    q = np.sum(sd * sd, axis=-1, keepdims=True)
    ne2 = q + eps * eps
    phi = q / ((1.0 + q) * np.sqrt(ne2))
    out = np.moveaxis(sd * phi, -1, axis)

    def bw(g):
        gd = np.moveaxis(g, axis, -1)
        dphi = (ne2 - 0.5 * q * (1.0 + q)) / ((1.0 + q) ** 2 * ne2 * np.sqrt(ne2))
        proj = np.sum(sd * gd, axis=-1, keepdims=True)
        return (np.moveaxis(phi * gd + 2.0 * dphi * proj * sd, -1, axis),)

    return apply("squash", np.ascontiguousarray(out), (s,), bw)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def vector_length(v: Tensor, axis: int = -1) -> Tensor:
    """Euclidean length along ``axis``; zero vectors get a zero (sub)gradient.

    Lengths are capped at the largest double below one so squashed vectors
    never report a length of exactly 1 after rounding.
    """
    n = np.sqrt(np.sum(v.data * v.data, axis=axis))
    capped = n > _BELOW_ONE
    out = np.where(capped, _BELOW_ONE, n)

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        coef = np.where((n > 0) & ~capped, g / safe, 0.0)
        return (v.data * np.expand_dims(coef, axis),)

    return apply("vector_length", out, (v,), bw)


def count_parameters(params: Iterable[Tensor]) -> int:
    """Total number of scalar entries across ``params``."""
    return int(sum(p.size for p in params))
