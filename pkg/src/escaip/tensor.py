"""Dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy float buffers (float32 by default, float64 for
verification runs). Operations executed while a ComputationTape is active are
recorded on it; ComputationTape.backward replays the records once, in reverse
execution order, accumulating gradients into Tensor.grad (shared parameters
sum across uses). Without an active tape every operation is plain inference.

Broadcasting follows numpy's trailing-axis rules only; anything fancier needs
an explicit reshape/broadcast_to so the backward rules stay auditable.

A tape is single-writer: one forward/backward pass owns it. Parameter tensors
may be shared read-only across workers; each worker opens its own tape.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_tls = threading.local()


def _current_tape():
    return getattr(_tls, "tape", None)


# ---------------------------------------------------------------------------
# Allocation bookkeeping (feeds the benchmark's bytes-per-sample column).

class _AllocStats:
    __slots__ = ("current", "peak")

    def __init__(self):
        self.current = 0
        self.peak = 0


_alloc = _AllocStats()


def _on_alloc(nbytes: int):
    _alloc.current += nbytes
    if _alloc.current > _alloc.peak:
        _alloc.peak = _alloc.current


def _on_free(nbytes: int):
    _alloc.current -= nbytes


def reset_alloc_peak():
    """Reset the peak watermark to the currently live tensor bytes."""
    _alloc.peak = _alloc.current


def alloc_peak_bytes() -> int:
    """High-water mark of live tensor-buffer bytes since the last reset."""
    return _alloc.peak


class Tensor:
    """A shape + contiguous floating-point buffer, optionally differentiable."""

    __slots__ = ("data", "grad", "requires_grad", "_grad_owned", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._grad_owned = False
        nbytes = self.data.nbytes
        _on_alloc(nbytes)
        weakref.finalize(self, _on_free, nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars become constant tensors of matching dtype.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class ComputationTape:
    """Ordered record of executed operations for one forward/backward pass."""

    def __init__(self):
        self._records = []  # (backward_fn, output, inputs)

    def __enter__(self):
        if _current_tape() is not None:
            raise ContractError("a ComputationTape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor, params: dict | None = None):
        """Accumulate d(loss)/d(tensor) into .grad for everything on the tape.

        loss must be scalar. When ``params`` (name -> Tensor) is given, returns
        a name -> ndarray gradient map; parameters that never appeared on the
        tape get zero gradients. Repeat calls reset grads first, so two passes
        over the same tape yield bit-identical results.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        for _, out, inputs in self._records:
            out.grad = None
            out._grad_owned = False
            for t in inputs:
                t.grad = None
                t._grad_owned = False
        loss.grad = np.ones_like(loss.data)
        for fn, out, _ in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)
        if params is None:
            return None
        grads = {}
        for name, p in params.items():
            grads[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        return grads


def _record(inputs, out: Tensor, backward_fn):
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append((backward_fn, out, inputs))
    return out


def _accum(t: Tensor, g: np.ndarray):
    # constants (masks, labels) don't require grad: skip the work entirely
    if not t.requires_grad:
        return
    # first contribution borrows g (never mutated while borrowed); a second
    # contribution forces ownership so in-place accumulation stays safe
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to ``shape`` (inverse of trailing-axis broadcast)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.data.dtype}; cast explicitly")


# ---------------------------------------------------------------------------
# Elementwise and arithmetic primitives.

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _record((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _record((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record((a, b), out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data / b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record((a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g):
        _accum(a, -g)

    return _record((a,), out, backward)


def matmul(a: Tensor, b: Tensor, scale: float | None = None) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast).

    ``scale`` multiplies the product (fused, for attention logits).
    """
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    raw = np.matmul(a.data, b.data)
    if scale is not None:
        raw *= scale
    out = Tensor(raw)

    def backward(g):
        if scale is not None:
            g = g * scale
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _record((a, b), out, backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis; leading axes are flattened into one gemm."""
    _check_same_dtype(x, w, b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine inner dims disagree: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    x2 = x.data.reshape(rows, x.shape[-1])
    y = np.matmul(x2, w.data)
    y += b.data
    out = Tensor(y.reshape(lead + (w.shape[1],)))

    def backward(g):
        g2 = g.reshape(rows, w.shape[1])
        if x.requires_grad:
            _accum(x, np.matmul(g2, w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accum(w, np.matmul(x2.T, g2))
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _record((x, w, b), out, backward)


def silu(x: Tensor) -> Tensor:
    """Smooth gated unit x * sigmoid(x) (the engine's fixed nonlinearity)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)

    def backward(g):
        # d/dx = s * (1 + x * (1 - s)), built with in-place temporaries
        t = 1.0 - s
        t *= x.data
        t += 1.0
        t *= s
        t *= g
        _accum(x, t)

    return _record((x,), out, backward)


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))

    def backward(g):
        _accum(x, g * np.sign(x.data))

    return _record((x,), out, backward)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: x^2/(2*beta) inside |x|<beta, |x|-beta/2 outside."""
    ax = np.abs(x.data)
    out = Tensor(np.where(ax < beta, x.data * x.data / (2.0 * beta), ax - 0.5 * beta))

    def backward(g):
        _accum(x, g * np.clip(x.data / beta, -1.0, 1.0))

    return _record((x,), out, backward)


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    out = Tensor(r)

    def backward(g):
        # guard the x == 0 corner: upstream gradient is zero there in all our
        # uses (norms behind a maximum() floor), so 0 instead of inf is correct
        safe = np.where(r > 0, r, 1.0)
        _accum(x, np.where(r > 0, g * 0.5 / safe, 0.0))

    return _record((x,), out, backward)


def maximum(x: Tensor, floor: float) -> Tensor:
    out = Tensor(np.maximum(x.data, floor))

    def backward(g):
        _accum(x, g * (x.data > floor))

    return _record((x,), out, backward)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g.reshape((1,) * x.ndim), x.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _record((x,), out, backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else (
        np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
    return reduce_sum(x, axis=axis, keepdims=keepdims) * float(1.0 / n)


# ---------------------------------------------------------------------------
# Structural primitives.

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _record((x,), out, backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b))

    def backward(g):
        _accum(x, np.ascontiguousarray(np.swapaxes(g, a, b)))

    return _record((x,), out, backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = Tensor(np.broadcast_to(x.data, shape).copy())
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {x.shape} to {tuple(shape)}") from e

    def backward(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _record((x,), out, backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, np.ascontiguousarray(np.moveaxis(moved[lo:hi], 0, axis)))

    return _record(tuple(tensors), out, backward)


def _scatter_add_rows(idx: np.ndarray, g: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum rows of g into num_rows buckets given by idx (inverse of a row gather)."""
    flat_idx = idx.reshape(-1)
    flat_g = g.reshape(flat_idx.size, -1)
    if flat_idx.size >= 2048:
        # np.add.at is an order of magnitude slower than a sparse matvec here
        import scipy.sparse as sp

        sel = sp.csr_matrix(
            (np.ones(flat_idx.size, dtype=g.dtype), flat_idx,
             np.arange(flat_idx.size + 1)),
            shape=(flat_idx.size, num_rows))
        return np.ascontiguousarray(sel.T @ flat_g)
    out = np.zeros((num_rows, flat_g.shape[1]), dtype=g.dtype)
    np.add.at(out, flat_idx, flat_g)
    return out


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of ``table`` by integer index; output shape index.shape + row."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise ShapeError("gather_rows index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = Tensor(table.data[idx])

    def backward(g):
        gt = _scatter_add_rows(idx, g, table.shape[0]).reshape(table.shape)
        _accum(table, gt)

    return _record((table,), out, backward)


def masked_sum(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Sum x over ``axis`` with invalid entries contributing exactly zero.

    ``mask`` is a constant boolean/0-1 array broadcastable to x; this is the
    neighbor-aggregation primitive for padded graphs.
    """
    m = np.asarray(mask, dtype=x.dtype)
    out = Tensor((x.data * m).sum(axis=axis))

    def backward(g):
        _accum(x, np.expand_dims(g, axis) * m)

    return _record((x,), out, backward)


def masked_softmax(logits: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with masked slots receiving exactly zero weight.

    Valid entries sum to 1 along the axis. Rows with no valid entry come back
    all-zero (the isolated-atom path); callers flag those from the graph mask.
    Masked logits never influence the result, whatever garbage they hold.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    z = np.where(m, logits.data, -np.inf)
    vmax = z.max(axis=axis, keepdims=True)
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)  # all-masked rows
    z -= vmax
    np.exp(z, out=z)  # exp(-inf) = exact 0 at masked slots
    denom = z.sum(axis=axis, keepdims=True)
    z /= np.where(denom > 0, denom, 1.0)
    out = Tensor(z.astype(logits.dtype, copy=False))

    def backward(g):
        s = (g * out.data).sum(axis=axis, keepdims=True)
        _accum(logits, out.data * (g - s))

    return _record((logits,), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv  # fresh buffer, safe in place
    y = xhat * gain.data
    y += bias.data
    out = Tensor(y)
    n = x.shape[-1]

    def backward(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            t1 = gx.sum(axis=-1, keepdims=True)
            t2 = (gx * xhat).sum(axis=-1, keepdims=True)
            gx *= n
            gx -= t1
            gx -= xhat * t2
            gx *= inv / n
            _accum(x, gx)

    return _record((x, gain, bias), out, backward)


def backward(loss: Tensor, params: dict | None = None):
    """Run the active tape backward from ``loss``; see ComputationTape.backward."""
    tape = _current_tape()
    if tape is None:
        raise ContractError("backward() requires an active ComputationTape")
    return tape.backward(loss, params)
