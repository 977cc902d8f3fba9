"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every operation computes its result
eagerly and records a backward rule plus its inputs on the output
tensor. ``backward`` replays the recorded rules in reverse creation
order, which is a valid topological order for graphs built
define-by-run. Gradients accumulate additively when a tensor feeds
several consumers.

float64 is the default dtype so finite-difference checks stay tight;
training and benchmarking code passes float32 explicitly.
"""

from __future__ import annotations

import hashlib
import itertools

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "GradCheckError",
    "zeros",
    "constant",
    "uniform",
    "he_normal",
    "from_array",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "sigmoid",
    "exp",
    "reduce_sum",
    "reshape",
    "slice_ranges",
    "concat_channels",
    "pad_spatial",
    "backward",
    "grad_check",
    "make_rng",
    "derive_seed",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A non-shape precondition was violated."""


class GradCheckError(RuntimeError):
    """A gradient check ran into NaN values."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Monotonic creation counter; reverse order of creation is the replay
# order for backward.
_seq = itertools.count()


def make_rng(seed):
    """Counter-based RNG stream for an explicit seed (no global state)."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(base_seed, *tags):
    """Stable sub-seed for (seed, purpose) pairs; independent of interpreter hashing."""
    text = "|".join([str(int(base_seed)), *map(str, tags)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Tensor:
    """N-dimensional real array with an optional gradient buffer.

    Image data uses the (N, C, H, W) layout. ``grad`` is populated by
    ``backward`` for every reachable tensor with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._rule = None
        self._seq = next(_seq)

    @classmethod
    def _from_op(cls, data, parents, rule):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        # Only tensors that can propagate a gradient go on the tape.
        if out.requires_grad:
            out._parents = tuple(parents)
            out._rule = rule
        else:
            out._parents = ()
            out._rule = None
        out._seq = next(_seq)
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def reshape(self, new_shape):
        return reshape(self, new_shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accum(tensor, contrib, fresh):
    """Accumulate a gradient contribution into ``tensor.grad``.

    ``fresh`` marks contributions the rule owns outright; shared or
    view contributions are copied before they can be mutated later.
    """
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = contrib if fresh else contrib.copy()
    else:
        tensor.grad += contrib


# -- creation ----------------------------------------------------------


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), requires_grad)


def constant(shape, value, dtype=np.float64, requires_grad=False):
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype), requires_grad)


def uniform(shape, seed, lo=-1.0, hi=1.0, dtype=np.float64, requires_grad=False):
    data = make_rng(seed).uniform(lo, hi, size=_check_shape(shape)).astype(dtype)
    return Tensor(data, requires_grad)


def he_normal(shape, seed, fan_in, dtype=np.float64, requires_grad=False):
    if fan_in < 1:
        raise ContractError(f"fan_in must be >= 1, got {fan_in}")
    std = float(np.sqrt(2.0 / fan_in))
    data = make_rng(seed).normal(0.0, std, size=_check_shape(shape)).astype(dtype)
    return Tensor(data, requires_grad)


def from_array(arr, requires_grad=False, dtype=None):
    return Tensor(np.array(arr, dtype=dtype, copy=True), requires_grad)


# -- elementwise -------------------------------------------------------


def _broadcast_pair(a, b):
    """Return views of the operands valid under the supported broadcasts.

    Allowed: identical shapes, a scalar on either side, or a length-C
    vector against an (N, C, H, W) tensor.
    """
    if a.shape == b.shape:
        return a.data, b.data
    av, bv = a.data, b.data
    if av.ndim == 0:
        return av, bv
    if bv.ndim == 0:
        return av, bv
    if av.ndim == 4 and bv.ndim == 1 and bv.shape[0] == av.shape[1]:
        return av, bv.reshape(1, -1, 1, 1)
    if bv.ndim == 4 and av.ndim == 1 and av.shape[0] == bv.shape[1]:
        return av.reshape(1, -1, 1, 1), bv
    raise ShapeError(f"incompatible shapes for elementwise op: {a.shape} vs {b.shape}")


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # Per-channel vector against (N, C, H, W).
    return grad.sum(axis=(0, 2, 3)).reshape(shape)


def _check_dtypes(a, b):
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes {a.dtype} vs {b.dtype}; cast explicitly")


def add(a, b):
    _check_dtypes(a, b)
    av, bv = _broadcast_pair(a, b)
    out_data = av + bv

    def rule(g):
        _accum(a, _reduce_to(g, a.shape), fresh=a.shape != out_data.shape)
        _accum(b, _reduce_to(g, b.shape), fresh=b.shape != out_data.shape)

    return Tensor._from_op(out_data, (a, b), rule)


def sub(a, b):
    _check_dtypes(a, b)
    av, bv = _broadcast_pair(a, b)
    out_data = av - bv

    def rule(g):
        _accum(a, _reduce_to(g, a.shape), fresh=a.shape != out_data.shape)
        _accum(b, _reduce_to(-g, b.shape), fresh=True)

    return Tensor._from_op(out_data, (a, b), rule)


def mul(a, b):
    _check_dtypes(a, b)
    av, bv = _broadcast_pair(a, b)
    out_data = av * bv

    def rule(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * bv, a.shape), fresh=True)
        if b.requires_grad:
            _accum(b, _reduce_to(g * av, b.shape), fresh=True)

    return Tensor._from_op(out_data, (a, b), rule)


def div(a, b):
    _check_dtypes(a, b)
    av, bv = _broadcast_pair(a, b)
    out_data = av / bv

    def rule(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g / bv, a.shape), fresh=True)
        if b.requires_grad:
            _accum(b, _reduce_to(-g * av / (bv * bv), b.shape), fresh=True)

    return Tensor._from_op(out_data, (a, b), rule)


def relu(a):
    """max(x, 0) elementwise."""
    out_data = np.maximum(a.data, 0)

    def rule(g):
        _accum(a, g * (a.data > 0), fresh=True)

    return Tensor._from_op(out_data, (a,), rule)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def rule(g):
        _accum(a, g * out_data * (1.0 - out_data), fresh=True)

    return Tensor._from_op(out_data, (a,), rule)


def exp(a):
    out_data = np.exp(a.data)

    def rule(g):
        _accum(a, g * out_data, fresh=True)

    return Tensor._from_op(out_data, (a,), rule)


# -- structure ---------------------------------------------------------


def reduce_sum(a, axes=None, keepdims=False):
    if axes is None:
        norm_axes = tuple(range(a.ndim))
    else:
        axes_tuple = (axes,) if isinstance(axes, int) else tuple(axes)
        norm_axes = tuple(ax % a.ndim for ax in axes_tuple)
        if len(set(norm_axes)) != len(norm_axes):
            raise ShapeError(f"duplicate axes {axes}")
        if any(ax >= a.ndim for ax in norm_axes):
            raise ShapeError(f"axis out of range for ndim {a.ndim}: {axes}")
    out_data = a.data.sum(axis=norm_axes, keepdims=keepdims)

    def rule(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, norm_axes)
        _accum(a, np.broadcast_to(gg, a.shape), fresh=False)

    return Tensor._from_op(np.asarray(out_data), (a,), rule)


def reshape(a, new_shape):
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {new_shape} changes element count")
    out_data = a.data.reshape(new_shape)

    def rule(g):
        _accum(a, g.reshape(a.shape), fresh=False)

    return Tensor._from_op(out_data, (a,), rule)


def slice_ranges(a, ranges):
    """Slice with half-open (start, stop) pairs per axis; None keeps an axis whole."""
    if len(ranges) > a.ndim:
        raise ShapeError(f"{len(ranges)} ranges for ndim {a.ndim}")
    index = []
    for axis, rng in enumerate(ranges):
        if rng is None:
            index.append(slice(None))
            continue
        start, stop = int(rng[0]), int(rng[1])
        extent = a.shape[axis]
        if not (0 <= start < stop <= extent):
            raise ShapeError(f"range ({start}, {stop}) overflows axis {axis} of extent {extent}")
        index.append(slice(start, stop))
    index = tuple(index)
    out_data = a.data[index].copy()

    def rule(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[index] = g
        _accum(a, full, fresh=True)

    return Tensor._from_op(out_data, (a,), rule)


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects (N, C, H, W) operands")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat operands disagree outside channels: {a.shape} vs {b.shape}")
    _check_dtypes(a, b)
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def rule(g):
        _accum(a, g[:, :ca], fresh=False)
        _accum(b, g[:, ca:], fresh=False)

    return Tensor._from_op(out_data, (a, b), rule)


def pad_spatial(a, pad, mode="zeros"):
    """Zero-pad the two trailing spatial axes by ``pad`` on every side."""
    if mode != "zeros":
        raise ContractError(f"unsupported pad mode {mode!r}")
    pad = int(pad)
    if pad < 0:
        raise ContractError("pad must be >= 0")
    if a.ndim < 2:
        raise ShapeError("pad_spatial needs at least 2 axes")
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out_data = np.pad(a.data, width)

    def rule(g):
        sl = (Ellipsis, slice(pad, g.shape[-2] - pad), slice(pad, g.shape[-1] - pad))
        _accum(a, g[sl], fresh=False)

    return Tensor._from_op(out_data, (a,), rule)


# -- backward ----------------------------------------------------------


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Rules replay in reverse creation order. The traversed graph is
    released afterwards, so a graph supports a single backward pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._rule is None:
        raise ContractError("loss has no recorded operations to differentiate")

    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._rule is None:
            continue
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        rule = t._rule
        rule(t.grad)
        # Release intermediates eagerly to bound peak memory.
        t.grad = None
        t._rule = None
        t._parents = ()


# -- verification ------------------------------------------------------


def grad_check(f, inputs, eps=1e-4, max_checks=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensors to a scalar Tensor and must be safe to
    call repeatedly. Relative error per element is
    |a - n| / max(1e-12, |a| + |n|). ``max_checks`` caps how many
    elements per input are probed (sampled with ``seed``), for use on
    large graphs.
    """
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must have requires_grad set")
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")
        t.zero_grad()

    out = f(*inputs)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.zero_grad()

    worst = 0.0
    rng = make_rng(seed)
    for which, t in enumerate(inputs):
        a = analytic[which]
        if np.isnan(a).any():
            where = np.argwhere(np.isnan(a))[0]
            raise GradCheckError(f"NaN analytic gradient in input {which} at {tuple(where)}")
        flat = t.data.reshape(-1)
        n_elems = flat.shape[0]
        if max_checks is not None and n_elems > max_checks:
            idx_iter = rng.choice(n_elems, size=max_checks, replace=False)
        else:
            idx_iter = range(n_elems)
        a_flat = a.reshape(-1)
        for idx in idx_iter:
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = f(*inputs).item()
            flat[idx] = orig - eps
            lo = f(*inputs).item()
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            if np.isnan(numeric):
                raise GradCheckError(f"NaN numeric gradient in input {which} at flat index {int(idx)}")
            err = abs(a_flat[idx] - numeric) / max(1e-12, abs(a_flat[idx]) + abs(numeric))
            if err > worst:
                worst = err
    return worst
