"""Minimal reverse-mode automatic differentiation over dynamically built graphs.

The operator set is exactly what the communication-game models need: affine
maps, GRU cells, softmax cross entropy, straight-through categorical sampling,
and the elementwise pieces the listener losses are made of.  Tensors are thin
wrappers around numpy arrays; every operation records a backward closure and
``backward`` walks the graph in reverse topological order.

There is no general broadcasting.  The only implicit expansion is adding a
bias row vector to a matrix; everything else requires matching shapes, and a
mismatch raises :class:`DimensionError` naming the offending operand.

Default precision is float32.  Gradient checks run the whole graph in float64
via :func:`use_dtype`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype used for newly created leaf tensors."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


class Tensor:
    """A value in the computation graph.

    ``data`` is a numpy array, ``grad`` is a same-shaped accumulator that is
    ``None`` until the first backward pass touches it (meaning: exactly zero).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; the function forms below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None):
    """A tensor that never requires grad (noise, masks, lookup targets)."""
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    return t


def parameter(data, dtype=None):
    t = Tensor.__new__(Tensor)
    t.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
    t.grad = None
    t.requires_grad = True
    t._parents = ()
    t._backward = None
    return t


def init_uniform(rng, shape, fan_in, dtype=None):
    """Matrix init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def zeros_param(shape, dtype=None):
    return parameter(np.zeros(shape), dtype=dtype)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss, seed_grad=None):
    """Reverse-mode pass from ``loss`` into every reachable ``requires_grad`` leaf."""
    if seed_grad is None:
        if loss.data.size != 1:
            raise DimensionError("backward: loss must be scalar unless seed_grad is given")
        seed_grad = np.ones_like(loss.data)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    _accum(loss, seed_grad)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / structural operations


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: operand shapes differ, left={a.data.shape} right={b.data.shape}"
        )


def add(a, b):
    if a.data.shape == b.data.shape:
        out_data = a.data + b.data

        def bw(g):
            _accum(a, g)
            _accum(b, g)

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out_data = a.data + b.data  # bias row added to every row

        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

    else:
        raise DimensionError(
            f"add: operand shapes incompatible, left={a.data.shape} right={b.data.shape}"
        )
    return Tensor._from_op(out_data, (a, b), bw)


def sub(a, b):
    _check_same_shape("sub", a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def neg(a):
    def bw(g):
        _accum(a, -g)

    return Tensor._from_op(-a.data, (a,), bw)


def mul(a, b):
    _check_same_shape("mul", a, b)
    a_data, b_data = a.data, b.data

    def bw(g):
        _accum(a, g * b_data)
        _accum(b, g * a_data)

    return Tensor._from_op(a_data * b_data, (a, b), bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return Tensor._from_op(a.data * s, (a,), bw)


def one_minus(a):
    def bw(g):
        _accum(a, -g)

    return Tensor._from_op(1.0 - a.data, (a,), bw)


def square(a):
    a_data = a.data

    def bw(g):
        _accum(a, g * (2.0 * a_data))

    return Tensor._from_op(a_data * a_data, (a,), bw)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * (0.5 / out_data))

    return Tensor._from_op(out_data, (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return Tensor._from_op(out_data, (a,), bw)


def log(a):
    a_data = a.data

    def bw(g):
        _accum(a, g / a_data)

    return Tensor._from_op(np.log(a_data), (a,), bw)


def reciprocal(a):
    a_data = a.data

    def bw(g):
        _accum(a, -g / (a_data * a_data))

    return Tensor._from_op(1.0 / a_data, (a,), bw)


def clamp_min(a, floor):
    mask = a.data >= floor

    def bw(g):
        _accum(a, g * mask)

    return Tensor._from_op(np.maximum(a.data, floor), (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return Tensor._from_op(a.data * mask, (a,), bw)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out_data = _sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (a,), bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes, left={a.data.shape} right={b.data.shape}"
        )
    a_data, b_data = a.data, b.data

    def bw(g):
        _accum(a, g @ b_data.T)
        _accum(b, a_data.T @ g)

    return Tensor._from_op(a_data @ b_data, (a, b), bw)


def tsum(a, axis=None):
    in_shape = a.data.shape

    def bw(g):
        if axis is None:
            _accum(a, np.full(in_shape, g, dtype=a.data.dtype))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), in_shape))

    return Tensor._from_op(np.sum(a.data, axis=axis), (a,), bw)


def tmean(a, axis=None):
    in_shape = a.data.shape
    n = a.data.size if axis is None else in_shape[axis]

    def bw(g):
        if axis is None:
            _accum(a, np.full(in_shape, g / n, dtype=a.data.dtype))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g / n, axis), in_shape))

    return Tensor._from_op(np.mean(a.data, axis=axis), (a,), bw)


def rows(table, ids):
    """Embedding lookup: select rows of a (V, D) table by an integer id array."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise DimensionError(f"rows: table must be 2-D, got shape {table.data.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.data.shape[0]):
        raise IndexError(f"rows: id out of range for table with {table.data.shape[0]} rows")

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return Tensor._from_op(table.data[ids], (table,), bw)


def stack_cols(parts):
    """Stack K same-length vectors (B,) into a (B, K) matrix."""
    datas = [p.data for p in parts]

    def bw(g):
        for k, p in enumerate(parts):
            _accum(p, g[:, k])

    return Tensor._from_op(np.stack(datas, axis=1), tuple(parts), bw)


def slice_cols(a, j0, j1):
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols: input must be 2-D, got shape {a.data.shape}")
    in_shape = a.data.shape

    def bw(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[:, j0:j1] = g
        _accum(a, full)

    return Tensor._from_op(np.ascontiguousarray(a.data[:, j0:j1]), (a,), bw)


def softmax(a):
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * out_data, axis=-1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), bw)


def log_softmax(a):
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out_data = shifted - lse
    p = np.exp(out_data)

    def bw(g):
        gsum = np.sum(g, axis=-1, keepdims=True)
        _accum(a, g - p * gsum)

    return Tensor._from_op(out_data, (a,), bw)


def softmax_cross_entropy(logits, target_index):
    """-log softmax(logits)[target]; gradient is softmax(logits) - one_hot(target).

    1-D logits with an int target give a scalar; (B, V) logits with a (B,)
    id array give a (B,) per-example loss vector.
    """
    x = logits.data
    if x.ndim == 1:
        v = x.shape[0]
        t = int(target_index)
        if not 0 <= t < v:
            raise IndexError(f"softmax_cross_entropy: target {t} out of range for V={v}")
        shifted = x - x.max()
        lse = np.log(np.sum(np.exp(shifted)))
        p = np.exp(shifted - lse)
        loss = lse - shifted[t]

        def bw(g):
            grad = p.copy()
            grad[t] -= 1.0
            _accum(logits, g * grad)

        return Tensor._from_op(np.asarray(loss, dtype=x.dtype), (logits,), bw)

    ids = np.asarray(target_index)
    b, v = x.shape
    if ids.shape != (b,):
        raise DimensionError(
            f"softmax_cross_entropy: targets shape {ids.shape} does not match batch {b}"
        )
    if ids.min() < 0 or ids.max() >= v:
        raise IndexError(f"softmax_cross_entropy: target out of range for V={v}")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    p = np.exp(shifted - lse[:, None])
    loss = lse - shifted[np.arange(b), ids]

    def bw(g):
        grad = p.copy()
        grad[np.arange(b), ids] -= 1.0
        _accum(logits, grad * g[:, None])

    return Tensor._from_op(loss, (logits,), bw)


def straight_through(hard_data, soft):
    """Forward the discretized value, route gradients through the soft path."""
    if hard_data.shape != soft.data.shape:
        raise DimensionError(
            f"straight_through: hard shape {hard_data.shape} != soft shape {soft.data.shape}"
        )

    def bw(g):
        _accum(soft, g)

    return Tensor._from_op(hard_data.astype(soft.data.dtype), (soft,), bw)


def dropout(a, p, rng, training):
    """Inverted dropout; identity when p == 0 or not training."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    keep = keep.astype(a.data.dtype)

    def bw(g):
        _accum(a, g * keep)

    return Tensor._from_op(a.data * keep, (a,), bw)


# ---------------------------------------------------------------------------
# GRU cell


@dataclass
class GRUParams:
    """Fused GRU weights; gate order along columns is (reset, update, candidate)."""

    w_ih: Tensor  # (d_in, 3*d_hid)
    w_hh: Tensor  # (d_hid, 3*d_hid)
    bias: Tensor  # (3*d_hid,)

    @property
    def d_hid(self):
        return self.w_hh.data.shape[0]

    @property
    def d_in(self):
        return self.w_ih.data.shape[0]

    def tensors(self):
        return [self.w_ih, self.w_hh, self.bias]


def init_gru(rng, d_in, d_hid, dtype=None):
    return GRUParams(
        w_ih=init_uniform(rng, (d_in, 3 * d_hid), d_in, dtype=dtype),
        w_hh=init_uniform(rng, (d_hid, 3 * d_hid), d_hid, dtype=dtype),
        bias=zeros_param(3 * d_hid, dtype=dtype),
    )


def gru_cell(h_prev, x, params):
    """One GRU step: reset/update gates, candidate state, convex combination.

    ``h_prev`` and ``x`` are (B, d_hid) and (B, d_in).  With all-zero weights
    the update gate is 0.5 and the candidate 0, so the output is 0.5*h_prev.
    """
    d = params.d_hid
    if x.data.ndim != 2 or x.data.shape[1] != params.d_in:
        raise DimensionError(
            f"gru_cell: x has shape {x.data.shape}, expected (B, {params.d_in})"
        )
    if h_prev.data.ndim != 2 or h_prev.data.shape[1] != d:
        raise DimensionError(
            f"gru_cell: h_prev has shape {h_prev.data.shape}, expected (B, {d})"
        )
    if x.data.shape[0] != h_prev.data.shape[0]:
        raise DimensionError(
            f"gru_cell: batch mismatch, x has {x.data.shape[0]} rows, h_prev has "
            f"{h_prev.data.shape[0]}"
        )
    gi = add(matmul(x, params.w_ih), params.bias)
    gh = matmul(h_prev, params.w_hh)
    r = sigmoid(add(slice_cols(gi, 0, d), slice_cols(gh, 0, d)))
    z = sigmoid(add(slice_cols(gi, d, 2 * d), slice_cols(gh, d, 2 * d)))
    n = tanh(add(slice_cols(gi, 2 * d, 3 * d), mul(r, slice_cols(gh, 2 * d, 3 * d))))
    return add(mul(one_minus(z), n), mul(z, h_prev))


# ---------------------------------------------------------------------------
# straight-through Gumbel-softmax


@dataclass
class GumbelConfig:
    """Sampling temperature is fixed for a whole training run."""

    temperature: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("GumbelConfig: temperature must be > 0")


def sample_gumbel(rng, shape, dtype):
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return (-np.log(-np.log(u))).astype(dtype)


def one_hot(ids, v, dtype=None):
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (v,), dtype=dtype or _DEFAULT_DTYPE)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def gumbel_softmax_st(logits, temperature, rng):
    """Sample a one-hot vector per row; gradients flow through the soft sample.

    Forward value is exactly one-hot at argmax(logits + g) with g i.i.d.
    standard Gumbel (ties broken by lowest index); the backward path is the
    softmax of (logits + g) / temperature.  Returns (message_step, ids).
    """
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("gumbel_softmax_st: logits contain non-finite values")
    g = sample_gumbel(rng, logits.data.shape, logits.data.dtype)
    perturbed = add(logits, constant(g, dtype=logits.data.dtype))
    ids = np.argmax(perturbed.data, axis=-1)
    soft = softmax(scale(perturbed, 1.0 / temperature))
    hard = one_hot(ids, logits.data.shape[-1], dtype=logits.data.dtype)
    return straight_through(hard, soft), ids


def gumbel_softmax_soft(logits, temperature, rng):
    """The relaxed sample alone (debug/probe path for gradient checks)."""
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("gumbel_softmax_soft: logits contain non-finite values")
    g = sample_gumbel(rng, logits.data.shape, logits.data.dtype)
    perturbed = add(logits, constant(g, dtype=logits.data.dtype))
    return softmax(scale(perturbed, 1.0 / temperature))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(build, params, eps=1e-5):
    """Max relative error between reverse-mode gradients and central differences.

    ``build`` re-runs the forward graph from the current parameter values and
    must return a scalar tensor; any stochastic choices inside it must be
    frozen by the caller.  Relative error uses a denominator floor of 1e-3 so
    near-zero gradients are compared absolutely.  Run under
    ``use_dtype(np.float64)`` for meaningful tolerances.
    """
    out = build()
    if out.data.size != 1:
        raise DimensionError("grad_check: graph output must be scalar")
    for p in params:
        p.grad = None
    backward(out)
    analytic = [p.grad_or_zeros().copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build().data)
            flat[i] = orig - eps
            f_minus = float(build().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(a_flat[i]) - numeric) / max(abs(float(a_flat[i])), abs(numeric), 1e-3)
            worst = max(worst, err)
    return worst
