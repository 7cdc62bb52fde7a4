"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: flat row-major numpy storage plus the
handful of differentiable operations the fusion network needs.  Every
operation that consumes a tracked tensor appends a graph node carrying the
values its backward rule requires; nodes carry a monotonically increasing
sequence number, so creation order is a topological order and `backward`
propagates in strict reverse creation order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyPoolError,
    NumericError,
)

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class GraphNode:
    """One record of the differentiation graph.

    `backward` maps the upstream gradient of the node's output to a tuple of
    gradients aligned with `inputs` (None for untracked inputs).
    """

    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_seq)


class Tensor:
    """Dense array of 64-bit reals, optionally part of a differentiation graph.

    `data` exposes the flat row-major storage; `grad`, when populated, has the
    same length.  Leaves created with ``requires_grad=True`` receive gradient
    accumulation from `backward`; results of operations on tracked tensors are
    tracked automatically.
    """

    __slots__ = ("array", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad=False):
        self.array = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.array.shape

    @property
    def data(self):
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def item(self):
        if self.array.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and ndarrays are wrapped as constants.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(arr):
    t = Tensor.__new__(Tensor)
    t.array = arr
    t.requires_grad = False
    t.grad = None
    t.node = None
    return t


def _tracked(arr, op, inputs, backward):
    t = Tensor.__new__(Tensor)
    t.array = arr
    t.requires_grad = True
    t.grad = None
    t.node = GraphNode(op, inputs, backward)
    return t


def _track(*tensors):
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.array + b.array
    if _grad_enabled and (a.requires_grad or b.requires_grad):
        a_shape, b_shape = a.shape, b.shape

        def bw(g):
            ga = _unbroadcast(g, a_shape) if a.requires_grad else None
            gb = _unbroadcast(g, b_shape) if b.requires_grad else None
            return ga, gb

        return _tracked(out, "add", (a, b), bw)
    return _const(out)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.array - b.array
    if _grad_enabled and (a.requires_grad or b.requires_grad):
        a_shape, b_shape = a.shape, b.shape

        def bw(g):
            ga = _unbroadcast(g, a_shape) if a.requires_grad else None
            gb = _unbroadcast(-g, b_shape) if b.requires_grad else None
            return ga, gb

        return _tracked(out, "sub", (a, b), bw)
    return _const(out)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.array * b.array
    if _grad_enabled and (a.requires_grad or b.requires_grad):
        a_shape, b_shape = a.shape, b.shape

        def bw(g):
            ga = _unbroadcast(g * b.array, a_shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.array, b_shape) if b.requires_grad else None
            return ga, gb

        return _tracked(out, "mul", (a, b), bw)
    return _const(out)


# ---------------------------------------------------------------------------
# linear algebra


def _check_matmul_shapes(a_shape, b_shape):
    if len(a_shape) < 2 or len(b_shape) < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a_shape} x {b_shape}")
    if a_shape[-1] != b_shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a_shape} x {b_shape}")
    for na, nb in zip(reversed(a_shape[:-2]), reversed(b_shape[:-2])):
        if na != nb and na != 1 and nb != 1:
            raise DimensionError(f"matmul batch extents incompatible: {a_shape} x {b_shape}")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_matmul_shapes(a.shape, b.shape)
    out = np.matmul(a.array, b.array)
    if _track(a, b):
        a_shape, b_shape = a.shape, b.shape

        def bw(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.array, -1, -2)), a_shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.array, -1, -2), g), b_shape)
            return ga, gb

        return _tracked(out, "matmul", (a, b), bw)
    return _const(out)


def transpose(x, axes):
    x = _as_tensor(x)
    out = np.transpose(x.array, axes)
    if _track(x):
        inv = tuple(np.argsort(axes))

        def bw(g):
            return (np.transpose(g, inv),)

        return _tracked(out, "transpose", (x,), bw)
    return _const(out)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    out = np.reshape(x.array, shape)
    if _track(x):

        def bw(g):
            return (np.reshape(g, old),)

        return _tracked(out, "reshape", (x,), bw)
    return _const(out)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis if axis >= 0 else axis + len(ref)
    if ax < 0 or ax >= len(ref):
        raise DimensionError(f"concat axis {axis} out of range for rank {len(ref)}")
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(
                f"concat extents differ off axis {ax}: {ref} vs {t.shape}"
            )
    out = np.concatenate([t.array for t in tensors], axis=ax)
    if _track(*tensors):
        sizes = [t.shape[ax] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            pieces = np.split(g, splits, axis=ax)
            return tuple(
                p if t.requires_grad else None for p, t in zip(pieces, tensors)
            )

        return _tracked(out, "concat", tuple(tensors), bw)
    return _const(out)


def take_rows(x, indices):
    """Gather rows along the first axis; backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = x.array[idx]
    if _track(x):
        in_shape = x.shape

        def bw(g):
            gx = np.zeros(in_shape)
            np.add.at(gx, idx, g)
            return (gx,)

        return _tracked(out, "take_rows", (x,), bw)
    return _const(out)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.array, 0.0)
    if _track(x):
        # subgradient at 0 is 0
        pos = x.array > 0.0

        def bw(g):
            return (g * pos,)

        return _tracked(out, "relu", (x,), bw)
    return _const(out)


def softmax_lastdim(x):
    x = _as_tensor(x)
    if x.array.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a last extent >= 1, got shape {x.shape}")
    shifted = x.array - x.array.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if _track(x):

        def bw(g):
            inner = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - inner),)

        return _tracked(out, "softmax_lastdim", (x,), bw)
    return _const(out)


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize each slice along the last axis, then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm params must have shape ({d},), got {gain.shape} / {bias.shape}"
        )
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = x.array.mean(axis=-1, keepdims=True)
    xc = x.array - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.array + bias.array
    if _track(x, gain, bias):

        def bw(g):
            gx = gg = gb = None
            if x.requires_grad:
                dxhat = g * gain.array
                gx = inv * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
            lead = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                gg = (g * xhat).sum(axis=lead)
            if bias.requires_grad:
                gb = g.sum(axis=lead)
            return gx, gg, gb

        return _tracked(out, "layer_norm", (x, gain, bias), bw)
    return _const(out)


def masked_mean_pool(x, mask):
    """Mean of the rows of x whose mask entry is 1.

    Gathers the valid rows before reducing, so padded rows cannot perturb the
    result even at the level of floating-point summation order.
    """
    x = _as_tensor(x)
    m = np.asarray(mask)
    if x.array.ndim != 2 or m.ndim != 1 or m.shape[0] != x.shape[0]:
        raise DimensionError(
            f"masked_mean_pool needs (L, d) values and a length-L mask, got {x.shape} / {m.shape}"
        )
    idx = np.flatnonzero(m)
    if idx.size == 0:
        raise EmptyPoolError("masked_mean_pool over an all-zero mask")
    out = x.array[idx].mean(axis=0)
    if _track(x):
        in_shape = x.shape
        inv_n = 1.0 / idx.size

        def bw(g):
            gx = np.zeros(in_shape)
            gx[idx] = g * inv_n
            return (gx,)

        return _tracked(out, "masked_mean_pool", (x,), bw)
    return _const(out)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    x = _as_tensor(x)
    out = np.asarray(x.array.sum())
    if _track(x):
        in_shape = x.shape

        def bw(g):
            return (np.broadcast_to(g, in_shape).copy(),)

        return _tracked(out, "sum_all", (x,), bw)
    return _const(out)


def mean_all(x):
    x = _as_tensor(x)
    return mul(sum_all(x), 1.0 / x.array.size)


# ---------------------------------------------------------------------------
# backward pass


def backward(root):
    """Propagate gradients from a scalar root to all reachable tracked leaves.

    Repeated calls accumulate into leaf `.grad`; call `zero_grad` between
    steps to reset.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.array.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    seed = np.ones_like(root.array)
    if root.node is None:
        if root.requires_grad:
            _accumulate(root, seed)
        return

    # Gather the reachable subgraph, then walk it in reverse creation order.
    seen = set()
    stack = [root]
    op_tensors = []
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        op_tensors.append(t)
        stack.extend(t.node.inputs)
    op_tensors.sort(key=lambda t: t.node.seq, reverse=True)

    flow = {id(root): seed}
    for t in op_tensors:
        g = flow.pop(id(t), None)
        if g is None:
            continue
        grads = t.node.backward(g)
        for inp, gi in zip(t.node.inputs, grads):
            if gi is None:
                continue
            if inp.node is None:
                if inp.requires_grad:
                    _accumulate(inp, gi)
            else:
                prev = flow.get(id(inp))
                flow[id(inp)] = gi if prev is None else prev + gi


def _accumulate(leaf, g):
    if leaf.grad is None:
        leaf.grad = np.zeros_like(leaf.array)
    leaf.grad += g


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(f, point, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the dict of named parameter tensors to a scalar tensor and must
    be deterministic.  Error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if h <= 0:
        raise ContractError(f"finite_diff_check step must be positive, got {h}")
    for t in point.values():
        t.zero_grad()
    out = f(point)
    if not np.isfinite(out.array).all():
        raise NumericError("finite_diff_check objective is non-finite at the base point")
    backward(out)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.array))
        for name, t in point.items()
    }

    def probe():
        with no_grad():
            val = f(point).item()
        if not np.isfinite(val):
            raise NumericError("finite_diff_check objective is non-finite at a probe point")
        return val

    worst = 0.0
    for name, t in point.items():
        flat = t.array.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = probe()
            flat[i] = orig - h
            f_minus = probe()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(1.0, abs(grad[i]), abs(numeric))
            worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst
