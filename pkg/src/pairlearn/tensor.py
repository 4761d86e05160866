"""Reverse-mode automatic differentiation over dense float32 tensors.

Values are stored as float32. Reductions and the numerically sensitive
kernels (exp, log, softmax, log-softmax, layer norm, dot) accumulate in
float64 before rounding back to storage precision; matrix products with a
small inner dimension do the same. Scalar (0-d) float64 results of full
reductions and the fused losses keep their accumulator precision, so loss
values carry no storage rounding. A ``Tape`` records operations while
active, and ``Tape.backward`` walks the recording in reverse, summing
gradient contributions from every consumer of a node.

Every forward result is checked for NaN/Inf and raises ``NumericOverflow``
rather than propagating silently.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "ShapeMismatch",
    "NumericOverflow",
    "as_tensor",
    "parameter",
    "add",
    "subtract",
    "multiply",
    "scale",
    "power",
    "matmul",
    "conv2d",
    "relu",
    "gelu",
    "exp",
    "log",
    "mean",
    "tsum",
    "max_reduce",
    "softmax",
    "log_softmax",
    "layer_norm",
    "transpose",
    "reshape",
    "gather_rows",
    "dot",
    "concat",
    "detach",
    "pair_contrast",
    "kl_softened",
]

# inner dims at or below this take the float64 accumulation path in matmul
_SMALL_INNER_DIM = 32

_node_counter = itertools.count(1)
_tape_stack: list["Tape"] = []


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericOverflow(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class Tensor:
    """Dense float32 array participating in the active tape.

    ``node_id`` identifies the tensor on the tape and is absent (None) for
    constants. Leaf tensors created with ``requires_grad=True`` keep their
    id across tapes, which is how optimizers address gradients.
    """

    __slots__ = ("values", "node_id", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float32)
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return detach(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, as_tensor(other))

    def __rsub__(self, other):
        return subtract(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("division is only supported by python scalars")

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(values, requires_grad=True)


class _Recorded:
    __slots__ = ("out_id", "input_ids", "backward")

    def __init__(self, out_id, input_ids, backward):
        self.out_id = out_id
        self.input_ids = input_ids
        self.backward = backward


class GradientMap:
    """Per-leaf gradients produced by one backward pass.

    ``get`` returns an exact-zero array for any requires-grad tensor the
    loss does not reach.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def get(self, t: Tensor) -> np.ndarray:
        if t.node_id is not None and t.node_id in self._grads:
            return self._grads[t.node_id]
        return np.zeros_like(t.values)

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id is not None and t.node_id in self._grads

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Recording of one forward pass, replayed in reverse by ``backward``.

    Operations append in execution order, so every op's inputs precede it
    and a single reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self._ops: list[_Recorded] = []
        self._produced: set[int] = set()
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> GradientMap:
        """Accumulate d(loss)/d(leaf) for every requires-grad leaf seen."""
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._ops:
            raise ValueError("backward on an empty tape")
        if loss.node_id is None:
            raise ValueError("loss is not connected to this tape")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.values, dtype=np.float32)
        }
        for op in reversed(self._ops):
            g = grads.pop(op.out_id, None)
            if g is None:
                continue
            for nid, gin in zip(op.input_ids, op.backward(g)):
                if nid is None or gin is None:
                    continue
                acc = grads.get(nid)
                if acc is None:
                    grads[nid] = np.asarray(gin, dtype=np.float32).copy()
                else:
                    acc += np.asarray(gin, dtype=np.float32)
        leaf_grads = {nid: g for nid, g in grads.items() if nid in self._leaf_ids}
        return GradientMap(leaf_grads)


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericOverflow(f"{op} produced non-finite values")


def _make(out_values: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the backward rule when tracking applies.

    Arrays round to float32 storage; 0-d float64 results (fully reduced
    scalars such as losses) keep their accumulator precision.
    """
    out_values = np.asarray(out_values)
    if not (out_values.ndim == 0 and out_values.dtype == np.float64):
        out_values = out_values.astype(np.float32, copy=False)
    _check_finite(out_values, op)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.requires_grad = track
    out.node_id = next(_node_counter) if track else None
    if track:
        for t in inputs:
            if t.requires_grad and t.node_id not in tape._produced:
                tape._leaf_ids.add(t.node_id)
        ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        tape._ops.append(_Recorded(out.node_id, ids, backward))
        tape._produced.add(out.node_id)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _make(a.values + b.values, (a, b), bwd, "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "subtract")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _make(a.values - b.values, (a, b), bwd, "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "multiply")
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)

    return _make(av * bv, (a, b), bwd, "multiply")


def scale(t: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)

    def bwd(g):
        return (g * s32,)

    return _make(t.values * s32, (t,), bwd, "scale")


def power(t: Tensor, p: float) -> Tensor:
    tv = t.values

    def bwd(g):
        return (g * np.float32(p) * tv ** np.float32(p - 1.0),)

    return _make(tv ** np.float32(p), (t,), bwd, "power")


# ---------------------------------------------------------------------------
# linear algebra


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatch(f"matmul needs 2-d or higher operands, got {a.shape} and {b.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(av.shape[:-2], bv.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims differ, {a.shape} vs {b.shape}") from None

    if av.shape[-1] <= _SMALL_INNER_DIM:
        out = np.matmul(av.astype(np.float64), bv.astype(np.float64))
    else:
        out = np.matmul(av, bv)
    ash, bsh = a.shape, b.shape

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(bv)), ash)
        gb = _unbroadcast(np.matmul(_swap_last(av), g), bsh)
        return ga, gb

    return _make(out, (a, b), bwd, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-d vectors."""
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    out = np.float64(av.astype(np.float64) @ bv.astype(np.float64))

    def bwd(g):
        return g * bv, g * av

    return _make(np.asarray(out), (a, b), bwd, "dot")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross correlation of NCHW inputs with OIHW filters."""
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeMismatch(f"conv2d needs NCHW input and OIHW filters, got {x.shape} and {w.shape}")
    n, ci, h, wdt = xv.shape
    co, ci2, kh, kw = wv.shape
    if ci != ci2:
        raise ShapeMismatch(f"conv2d: input has {ci} channels but filters expect {ci2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d: filters {w.shape} do not fit input {x.shape} with pad={pad}")

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (N, Ci*kh*kw, Ho*Wo)
    w2 = wv.reshape(co, ci * kh * kw)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo)

    def bwd(g):
        g2 = g.reshape(n, co, ho * wo)
        gw = np.einsum("nop,nkp->ok", g2, cols).reshape(wv.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, ci, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                gxp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += gcols[:, :, ky, kx]
        gx = gxp[:, :, pad : pad + h, pad : pad + wdt] if pad else gxp
        return gx, gw

    return _make(out, (x, w), bwd, "conv2d")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, ci = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ci, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, ci * kh * kw, ho * wo)


# ---------------------------------------------------------------------------
# activations and pointwise transcendentals


def relu(t: Tensor) -> Tensor:
    tv = t.values

    def bwd(g):
        return (g * (tv > 0),)

    return _make(np.maximum(tv, 0), (t,), bwd, "relu")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(t: Tensor) -> Tensor:
    x = t.values.astype(np.float64)
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (t,), bwd, "gelu")


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.values.astype(np.float64))
    out32 = out.astype(np.float32)

    def bwd(g):
        return (g * out32,)

    return _make(out32, (t,), bwd, "exp")


def log(t: Tensor) -> Tensor:
    tv = t.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(tv.astype(np.float64))

    def bwd(g):
        return (g / tv,)

    return _make(out, (t,), bwd, "log")


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    tv = t.values
    axes = _axis_tuple(axis, tv.ndim)
    out = tv.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    shape = tv.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape),)

    return _make(out, (t,), bwd, "sum")


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    tv = t.values
    axes = _axis_tuple(axis, tv.ndim)
    count = int(np.prod([tv.shape[a] for a in axes])) if axes else 1
    out = tv.mean(axis=axes, keepdims=keepdims, dtype=np.float64)
    shape = tv.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape) / np.float32(count),)

    return _make(out, (t,), bwd, "mean")


def max_reduce(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    tv = t.values
    axes = _axis_tuple(axis, tv.ndim)
    if len(axes) != 1 and len(axes) != tv.ndim:
        raise ValueError("max_reduce supports a single axis or a full reduction")
    out = tv.max(axis=axes, keepdims=keepdims)
    shape = tv.shape

    def bwd(g):
        # gradient routes to the first maximum along the reduced axes
        gx = np.zeros(shape, dtype=np.float32)
        if len(axes) == tv.ndim:
            idx = np.unravel_index(np.argmax(tv), shape)
            gx[idx] = g.reshape(())
        else:
            ax = axes[0]
            idx = np.argmax(tv, axis=ax)
            gexp = g if keepdims else np.expand_dims(g, ax)
            np.put_along_axis(gx, np.expand_dims(idx, ax), gexp, axis=ax)
        return (gx,)

    return _make(out, (t,), bwd, "max_reduce")


# ---------------------------------------------------------------------------
# fused normalizing kernels


def _check_axis(t: Tensor, axis: int, op: str) -> int:
    if not -t.values.ndim <= axis < t.values.ndim:
        raise ValueError(f"{op}: axis {axis} invalid for shape {t.shape}")
    return axis % t.values.ndim


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(t, axis, "softmax")
    x = t.values.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(np.float32)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (t,), bwd, "softmax")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(t, axis, "log_softmax")
    x = t.values.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out).astype(np.float32)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (t,), bwd, "log_softmax")


def layer_norm(t: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    if t.values.ndim < 1 or t.values.shape[-1] < 1:
        raise ShapeMismatch(f"layer_norm needs a non-empty last axis, got {t.shape}")
    x = t.values.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = (x - mu) * inv
    xhat = xhat64.astype(np.float32)
    inv32 = inv.astype(np.float32)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv32 * (g - gm - xhat * gxm),)

    return _make(xhat, (t,), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(t: Tensor, axes=None) -> Tensor:
    tv = t.values
    if axes is None:
        axes = tuple(reversed(range(tv.ndim)))
    axes = tuple(a % tv.ndim for a in axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(tv, axes), (t,), bwd, "transpose")


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = t.values.shape
    try:
        out = t.values.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {old} to {shape}") from None

    def bwd(g):
        return (g.reshape(old),)

    return _make(out, (t,), bwd, "reshape")


def gather_rows(t: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis`` by integer index."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a 1-d index array")
    tv = t.values
    axis = axis % tv.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[axis]):
        raise IndexError(f"gather_rows: indices out of range for axis {axis} of {t.shape}")
    out = np.take(tv, idx, axis=axis)
    shape = tv.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=np.float32)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _make(out, (t,), bwd, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    vals = [t.values for t in tensors]
    ndim = vals[0].ndim
    axis = axis % ndim
    for v in vals[1:]:
        if v.ndim != ndim or any(v.shape[i] != vals[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeMismatch(
                f"concat: shapes {[t.shape for t in tensors]} differ outside axis {axis}"
            )
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate(vals, axis=axis), tuple(tensors), bwd, "concat")


def detach(t: Tensor) -> Tensor:
    """Value-identical tensor that blocks gradient flow to t's ancestors."""
    out = Tensor.__new__(Tensor)
    out.values = t.values
    out.requires_grad = False
    out.node_id = None
    return out


# ---------------------------------------------------------------------------
# fused batch-coupled losses
#
# Both kernels run float64 end to end and round only the scalar result,
# keeping them within 1e-6 of scalar-arithmetic references at any
# temperature; a composition of float32-storage ops cannot guarantee that
# once similarity scores grow past a few ulps of the tolerance.


def _log_softmax64(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def pair_contrast(hc: Tensor, ht: Tensor, tau: float) -> Tensor:
    """Paired-views contrastive loss over raw dot-product similarities.

    Every anchor on either side scores its N cross-branch candidates and
    its N-1 same-branch neighbors, 2N-1 candidates in all; the matched
    cross pair is the target. Returns the mean negative log probability
    over the 2N anchors.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if hc.shape != ht.shape or hc.values.ndim != 2:
        raise ShapeMismatch(f"embeddings must be matched N x d, got {hc.shape} and {ht.shape}")
    n = hc.shape[0]
    c64 = hc.values.astype(np.float64)
    t64 = ht.values.astype(np.float64)
    inv_tau = 1.0 / tau
    mask = np.where(np.eye(n, dtype=bool), -1e9, 0.0)
    eye_pad = np.concatenate([np.eye(n), np.zeros((n, n))], axis=1)

    def direction(a, b):
        logits = np.concatenate([a @ b.T * inv_tau, a @ a.T * inv_tau + mask], axis=1)
        ls = _log_softmax64(logits)
        loss = -np.trace(ls[:, :n])
        grad_logits = np.exp(ls) - eye_pad  # d(loss)/d(logits), unscaled
        return loss, grad_logits

    loss_c, gl_c = direction(c64, t64)
    loss_t, gl_t = direction(t64, c64)
    out = (loss_c + loss_t) / (2 * n)

    def bwd(g):
        s = float(g.reshape(())) * inv_tau / (2 * n)
        gc_cross, gc_self = gl_c[:, :n], gl_c[:, n:]
        gt_cross, gt_self = gl_t[:, :n], gl_t[:, n:]
        dc = s * (gc_cross @ t64 + (gc_self + gc_self.T) @ c64 + gt_cross.T @ t64)
        dt = s * (gt_cross @ c64 + (gt_self + gt_self.T) @ t64 + gc_cross.T @ c64)
        return dc, dt

    return _make(np.asarray(out), (hc, ht), bwd, "pair_contrast")


def kl_softened(zt: Tensor, zc: Tensor, rho: float) -> Tensor:
    """Mean KL from softened zt rows to softened zc rows (temperature rho)."""
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if zt.shape != zc.shape or zt.values.ndim != 2:
        raise ShapeMismatch(f"logits must be matched N x C, got {zt.shape} and {zc.shape}")
    n = zt.shape[0]
    r = 1.0 / rho
    lp = _log_softmax64(zt.values.astype(np.float64) * r)
    lq = _log_softmax64(zc.values.astype(np.float64) * r)
    p = np.exp(lp)
    q = np.exp(lq)
    diff = lp - lq
    row_kl = (p * diff).sum(axis=1, keepdims=True)
    out = row_kl.sum() / n

    def bwd(g):
        s = float(g.reshape(())) * r / n
        dzt = s * p * (diff - row_kl)
        dzc = s * (q - p)
        return dzt, dzc

    return _make(np.asarray(out), (zt, zc), bwd, "kl_softened")
