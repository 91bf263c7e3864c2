"""A small dense tensor engine with tape-based reverse-mode autodiff.

Values are numpy arrays (float32 or float64, row-major contiguous). Every
differentiable primitive is a plain function that computes its output with
numpy and, when a :class:`Tape` is active and some input requires grad,
appends a record holding a backward rule. :func:`backward` replays the tape
in reverse and accumulates ``d loss / d leaf`` into ``leaf.grad``.

Tapes are thread-local, so independent forward passes on different threads
never share one.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import GradError, NonFiniteError, ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-d array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES else np.float64
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._tape: Tape | None = None  # set on tensors produced by a recorded op

    @property
    def shape(self) -> tuple:
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
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only log of executed primitives.

    Use as a context manager; ops run inside the ``with`` block are recorded
    when at least one input requires grad::

        with Tape() as tape:
            loss = f(x)
        backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misnested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for rec in self.records:
            rec.out._tape = None
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise GradError("loss was not produced on this tape")
        backward(loss)


_check_finite = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-op NaN/Inf guard (on by default)."""
    global _check_finite
    _check_finite = bool(enabled)


def _make(out: np.ndarray, inputs: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if _check_finite and not np.isfinite(out).all():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    result = Tensor(out, dtype=out.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._tape = tape
        tape.records.append(_Record(result, tuple(inputs), rule))
    return result


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every grad-requiring leaf.

    Calling this twice without clearing ``grad`` accumulates.
    """
    if loss.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise GradError("loss was not produced under an active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                if inp.grad is None:
                    inp.grad = Tensor(gi.copy(), dtype=inp.dtype)
                else:
                    inp.grad.data += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.dtype for t in ts])


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.add(a.data, b.data, dtype=_result_dtype(a, b))

    def rule(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.subtract(a.data, b.data, dtype=_result_dtype(a, b))

    def rule(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scale(as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return _scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    out = np.multiply(a.data, b.data, dtype=_result_dtype(a, b))

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), rule, "mul")


def _scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.dtype.type(s)
    return _make(out, (a,), lambda g: (g * a.dtype.type(s),), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    out = (d * cdf).astype(x.dtype, copy=False)

    def rule(g):
        pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + d * pdf)).astype(x.dtype, copy=False),)

    return _make(out, (x,), rule, "gelu")


# ------------------------------------------------------------------- layout


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        if known == 0 or x.size % known:
            raise ShapeError(f"cannot reshape {x.shape} into {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}")
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank-{x.ndim} tensor")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "permute")


def pad_hw(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad a ``[B, H, W, C]`` tensor at the bottom and right."""
    if pad_h == 0 and pad_w == 0:
        return x
    B, H, W, C = x.shape
    out = np.zeros((B, H + pad_h, W + pad_w, C), dtype=x.dtype)
    out[:, :H, :W] = x.data
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g[:, :H, :W]),), "pad_hw")


def crop_hw(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` region of a ``[B, H, W, C]`` tensor."""
    B, H, W, C = x.shape
    if h == H and w == W:
        return x

    def rule(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :h, :w] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, :h, :w]), (x,), rule, "crop_hw")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table: ``out[...] = table[index[...]]``."""
    index = np.asarray(index, dtype=np.int64)
    rows, cols = table.shape
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ShapeError(f"index out of range for table with {rows} rows")
    out = table.data[index]

    def rule(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, cols))
        return (gt,)

    return _make(out, (table,), rule, "take_rows")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), rule, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    out = np.asarray(x.data.mean(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _make(out, (x,), rule, "mean")


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``.

    Batch dimensions must be equal, or one operand may be a plain matrix
    shared across the other's batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or not (
        a.shape[:-2] == b.shape[:-2] or a.ndim == 2 or b.ndim == 2
    ):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if a.ndim == 2 and g.ndim > 2:
                ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                if b.ndim == 2 and g.ndim > 2:
                    gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _make(out, (a, b), rule, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis, with ``w`` laid out ``[in, out]``."""
    k, n = w.shape
    if x.shape[-1] != k:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} does not match weight {w.shape}")
    if b is not None and b.shape != (n,):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(*lead, n)
    inputs = (x, w) if b is None else (x, w, b)

    def rule(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out, inputs, rule, "linear")


# ------------------------------------------------------------ normalisation


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.size == 0 or x.ndim == 0:
        raise ShapeError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), rule, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {C}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, C).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, C).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), rule, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = np.asarray(-logp[np.arange(B), labels].mean(), dtype=logits.dtype)

    def rule(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return _make(out, (logits,), rule, "cross_entropy")


# ----------------------------------------------------------------- resizing


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-d linear interpolation weights, half-pixel centres, edge-clamped."""
    m = np.zeros((n_out, n_in))
    if n_out == n_in:
        return np.eye(n_in)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinearly resample a ``[h, w, c]`` map to ``[H, W, c]``."""
    h, w, _ = x.shape
    H, W = size
    if (H, W) == (h, w):
        return x
    ah = bilinear_matrix(H, h).astype(x.dtype)
    aw = bilinear_matrix(W, w).astype(x.dtype)
    out = np.einsum("ih,jw,hwc->ijc", ah, aw, x.data, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,jw,ijc->hwc", ah, aw, g, optimize=True),),
                 "resize_bilinear")


# ------------------------------------------------------------------- noise


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; returns ``x`` itself when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.dtype))


# ------------------------------------------------------------ verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between the tape gradient and central differences.

    ``x`` is perturbed in place (and restored), so ``f`` may also close over
    it, which makes parameter tensors checkable. The per-coordinate error is
    ``|a - c| / (|a| + |c| + 1e-12)``. ``coords`` limits the check to a random
    subset of coordinates.
    """
    if x.dtype != np.float64:
        raise TypeError("finite_diff_check needs float64 inputs")
    saved_flag, saved_grad = x.requires_grad, x.grad
    try:
        x.requires_grad, x.grad = True, None
        with Tape():
            y = f(x)
        if y.size != 1:
            raise GradError(f"f must be scalar-valued, got shape {y.shape}")
        if not np.isfinite(y.data).all():
            raise NonFiniteError("f(x) is not finite")
        if y.requires_grad:
            backward(y)
        analytic = x.grad.data.copy() if x.grad is not None else np.zeros(x.shape)
        x.requires_grad = False

        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = np.random.default_rng(seed).choice(flat.size, coords, replace=False)
        worst = 0.0
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite value while perturbing coordinate {i}")
            cd = (fp - fm) / (2.0 * h)
            a = a_flat[i]
            worst = max(worst, abs(a - cd) / (abs(a) + abs(cd) + 1e-12))
        return worst
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad
