"""Tape-based reverse-mode differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, which is already a topological order.  ``backward`` walks the
tape once in reverse.  Anything computed outside a tape (teacher forwards, for
example) is a constant from the point of view of the gradient.

All arrays are float32 unless :func:`default_dtype` switches the engine to
float64, which the finite-difference checker does.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_DTYPE: type = np.float32
_TAPES: list["Tape"] = []
_RELU_PROBE: list | None = None


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the floating type new tensors are stored in."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def current_dtype():
    return _DTYPE


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    """An n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_DTYPE, copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=_DTYPE)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and the innermost one records.
    """

    nodes: list[Node] = field(default_factory=list)
    watched: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.requires_grad:
                self.watched[id(t)] = t

    def record(self, node: Node) -> None:
        for t in node.inputs:
            if t.requires_grad and t._tape is None:
                self.watched[id(t)] = t
        node.output._tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self.watched.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = g.astype(leaf.data.dtype, copy=False)
            # repeated backward calls accumulate, mirroring the usual framework contract
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf the loss's tape has seen."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape or active_tape()
    if tape is None:
        raise ParameterError("backward called on a loss produced without an active tape")
    tape.backward(loss)


def _make(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(op, arr)
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, inputs, out, bwd))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("add_scalar", a.data + _DTYPE(c), (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = _DTYPE(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _RELU_PROBE is not None:
        _RELU_PROBE.append(mask)
    return _make("relu", np.where(mask, a.data, 0).astype(_DTYPE), (a,), lambda g: (g * mask,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (2-d input) or per-channel (4-d input) bias."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    if x.data.ndim == 2:
        arr = x.data + b.data[None, :]
        axes: tuple[int, ...] = (0,)
    else:
        arr = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    return _make("add_bias", arr, (x, b), lambda g: (g, g.sum(axis=axes)))


# reductions / shape --------------------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum all entries (or one axis).  Accumulates in float64, then casts back."""
    shape = a.shape
    if axis is None:
        arr = np.asarray(a.data.sum(dtype=np.float64))

        def bwd(g):
            return (np.full(shape, g.reshape(()), dtype=g.dtype),)
    else:
        if not -a.data.ndim <= axis < a.data.ndim:
            raise DimensionError(f"sum: axis {axis} out of range for shape {shape}")
        arr = a.data.sum(axis=axis, dtype=np.float64)

        def bwd(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _make("sum", arr.astype(_DTYPE), (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    total = a.data.sum(dtype=np.float64) if axis is None else a.data.sum(axis=axis, dtype=np.float64)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.full(shape, g.reshape(()) / n, dtype=g.dtype),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _make("mean", np.asarray(total / n).astype(_DTYPE), (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    try:
        arr = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape
    return _make("reshape", arr, (a,), lambda g: (g.reshape(src),))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[n] = a[n, index[n]]``."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick: index {index.shape} incompatible with {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, index] = g
        return (full,)

    return _make("pick", a.data[rows, index], (a,), bwd)


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    # einsum keeps each output row independent of the batch size (BLAS does not)
    arr = np.einsum("ik,kj->ij", ad, bd)
    return _make("matmul", arr, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``N×C×H×W`` input with ``F×C×kh×kw`` kernels."""
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: bad stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise DimensionError(
            f"conv2d: non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    kd = kernel.data
    out = np.zeros((n, f, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,fc->nfhw", patch, kd[:, :, i, j])

    def bwd(g):
        gk = np.zeros_like(kd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gk[:, :, i, j] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
                gxp[sl] += np.tensordot(kd[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _make("conv2d", out, (x, kernel), bwd)


def avgpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or window > h or window > w:
        raise DimensionError(f"avgpool2d: window {window} does not fit {h}x{w}")
    ho, wo = h // window, w // window
    crop = x.data[:, :, : ho * window, : wo * window]
    blocks = crop.reshape(n, c, ho, window, wo, window)
    arr = (blocks.sum(axis=(3, 5), dtype=np.float64) / (window * window)).astype(_DTYPE)
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        up = np.repeat(np.repeat(g / (window * window), window, axis=2), window, axis=3)
        full[:, :, : ho * window, : wo * window] = up
        return (full,)

    return _make("avgpool2d", arr, (x,), bwd)


# probability ---------------------------------------------------------------

def log_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise ``s/τ - logsumexp(s/τ)`` with max subtraction."""
    if not temperature > 0:
        raise ParameterError(f"log_softmax: temperature must be > 0, got {temperature}")
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"log_softmax: expected N×K logits with K ≥ 2, got {logits.shape}")
    _check_finite("log_softmax input", logits.data)
    tau = _DTYPE(temperature)
    z = logits.data / tau
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = (z - lse).astype(_DTYPE)

    def bwd(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=1, keepdims=True)) / tau,)

    return _make("log_softmax", out, (logits,), bwd)


def normalize_rows(a: Tensor) -> Tensor:
    """Divide every row of a 2-d tensor by its L2 norm; all-zero rows stay zero."""
    if a.data.ndim != 2:
        raise DimensionError(f"normalize_rows: expected 2-d input, got {a.shape}")
    norm = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = (a.data / safe).astype(_DTYPE)
    live = (norm > 0).astype(_DTYPE)

    def bwd(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        return (((g - out * proj) / safe * live).astype(g.dtype),)

    return _make("normalize_rows", out, (a,), bwd)


# finite differences --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    flagged: list[tuple[int, ...]]
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _eval_probe(f, arr: np.ndarray) -> tuple[float, list]:
    global _RELU_PROBE
    prev, _RELU_PROBE = _RELU_PROBE, []
    try:
        val = float(f(Tensor(arr)).data.reshape(-1)[0])
        return val, _RELU_PROBE
    finally:
        _RELU_PROBE = prev


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-3,
    tol: float = 1e-4,
    dtype=np.float64,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``point`` with central differences.

    Coordinates whose ±h evaluations land on different sides of a relu kink are
    reported in ``flagged`` and left out of the error.
    """
    with default_dtype(dtype):
        base = np.array(point, dtype=dtype)
        x = Tensor(base, requires_grad=True)
        with Tape() as tape:
            tape.watch(x)
            y = f(x)
        backward(y)
        analytic = x.grad
        worst, worst_idx, flagged, checked = 0.0, None, [], 0
        for idx in np.ndindex(base.shape):
            xp, xm = base.copy(), base.copy()
            xp[idx] += h
            xm[idx] -= h
            fp, mp = _eval_probe(f, xp)
            fm, mm = _eval_probe(f, xm)
            if len(mp) != len(mm) or any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
                flagged.append(idx)
                continue
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if rel > worst or worst_idx is None:
                worst, worst_idx = max(worst, rel), idx
    return GradCheckReport(worst, worst_idx, flagged, checked, tol)
