"""Reverse-mode tape differentiation over numpy arrays.

A Tape records every primitive application in execution order, which is a
topological order by construction. backward() walks the record once in
reverse, accumulating gradients into parents, so shared subexpressions
receive the sum of their path gradients.

Storage dtype is float64 by default; float32 is allowed for large training
runs. Reductions (sums, means, variances, softmax denominators) always
accumulate at 64 bit regardless of storage dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

REAL_DTYPES = {"float64": np.float64, "float32": np.float32}


def as_tensor(data, dtype=np.float64):
    """Validate and return a dense real array (the TensorValue of this engine).

    Rejects NaN/Inf at creation; shape/row-major layout come from numpy.
    """
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ContractError("tensor creation rejects non-finite entries")
    return arr


class ComplexVector:
    """Pair of equal-shape real arrays holding re/im parts of a complex vector."""

    def __init__(self, re, im):
        self.re = np.asarray(re, dtype=np.float64)
        self.im = np.asarray(im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise DimensionError("re/im shapes differ")
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise ContractError("complex vector rejects non-finite entries")

    def to_complex(self):
        return self.re + 1j * self.im

    def __len__(self):
        return self.re.size


class Parameter:
    """Trainable value plus a same-shape gradient accumulator.

    The gradient starts at zero and is reset between optimizer steps.
    Complex parameters are stored as two real Parameters (re/im), so the
    tape stays real-valued.
    """

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value)
        if not np.all(np.isfinite(self.value)):
            raise ContractError(f"parameter {name!r} has non-finite entries")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


class Node:
    """One recorded primitive application: value, parents, backward rule."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes = []
        self._param_leaves = []

    def record(self, value, parents=(), backward_fn=None):
        node = Node(value, parents, backward_fn)
        self.nodes.append(node)
        return node

    def constant(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        return self.record(arr)

    def leaf(self, param: Parameter):
        """Enter a Parameter's current value onto the tape as a leaf node."""
        node = self.record(param.value)
        self._param_leaves.append((param, node))
        return node


def _accum(node: Node, grad, own: bool = False):
    """Add grad into node.grad. own=True adopts a freshly allocated array
    (callers must not reuse it); the default copies, which is required when
    the same buffer feeds several parents."""
    if node.grad is None:
        if own and isinstance(grad, np.ndarray) and grad.dtype == node.value.dtype:
            node.grad = grad
        else:
            node.grad = np.array(grad, dtype=node.value.dtype, copy=True)
    else:
        node.grad += grad


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back down to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad


def backward(tape: Tape, loss: Node):
    """Accumulate d loss / d leaf into every Parameter reachable from loss.

    Walks the record once in reverse; each processed node is released
    (value, closure, gradient) so large intermediates free as the sweep
    moves toward the leaves.
    """
    if loss.value.size != 1:
        raise ContractError("backward requires a scalar loss node")
    for node in tape.nodes:
        node.grad = None
    leaves = {id(leaf) for _, leaf in tape._param_leaves}
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
        if id(node) not in leaves:
            node.grad = None
            node.backward_fn = None
            node.parents = ()
            node.value = None
    for param, leaf in tape._param_leaves:
        if leaf.grad is not None:
            param.grad += leaf.grad.astype(param.grad.dtype, copy=False)
            leaf.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _as_node(tape, x, like=None):
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else np.float64
    return tape.constant(np.asarray(x, dtype=dtype))


def _binary(tape, a, b):
    a = _as_node(tape, a, b if isinstance(b, Node) else None)
    b = _as_node(tape, b, a)
    return a, b


def add(tape, a, b):
    a, b = _binary(tape, a, b)
    out = a.value + b.value

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape).astype(a.dtype, copy=False))
        _accum(b, _unbroadcast(g, b.shape).astype(b.dtype, copy=False))

    return tape.record(out, (a, b), bw)


def sub(tape, a, b):
    a, b = _binary(tape, a, b)
    out = a.value - b.value

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape).astype(a.dtype, copy=False))
        _accum(b, -_unbroadcast(g, b.shape).astype(b.dtype, copy=False))

    return tape.record(out, (a, b), bw)


def mul(tape, a, b):
    a, b = _binary(tape, a, b)
    out = a.value * b.value

    def bw(g):
        _accum(a, _unbroadcast(g * b.value, a.shape).astype(a.dtype, copy=False), own=True)
        _accum(b, _unbroadcast(g * a.value, b.shape).astype(b.dtype, copy=False), own=True)

    return tape.record(out, (a, b), bw)


def div(tape, a, b):
    a, b = _binary(tape, a, b)
    out = a.value / b.value

    def bw(g):
        _accum(a, _unbroadcast(g / b.value, a.shape).astype(a.dtype, copy=False), own=True)
        gb = -g * a.value / (b.value * b.value)
        _accum(b, _unbroadcast(gb, b.shape).astype(b.dtype, copy=False), own=True)

    return tape.record(out, (a, b), bw)


def scale(tape, a, c):
    """Multiply by a python-float constant (stays at a's dtype)."""
    c = float(c)
    out = a.value * c

    def bw(g):
        _accum(a, g * c, own=True)

    return tape.record(out, (a,), bw)


def neg(tape, a):
    return scale(tape, a, -1.0)


def matmul(tape, a, b):
    """Stacked matrix product with numpy broadcasting over leading axes."""
    a, b = _binary(tape, a, b)
    if a.value.ndim < 1 or b.value.ndim < 1:
        raise DimensionError("matmul requires at least 1-d operands")
    if a.value.shape[-1] != b.value.shape[-2 if b.value.ndim > 1 else 0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.value.shape} x {b.value.shape}"
        )
    out = a.value @ b.value

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        _accum(a, _unbroadcast(ga, a.shape).astype(a.dtype, copy=False), own=True)
        del ga
        gb = np.swapaxes(a.value, -1, -2) @ g
        _accum(b, _unbroadcast(gb, b.shape).astype(b.dtype, copy=False), own=True)

    return tape.record(out, (a, b), bw)


def transpose(tape, a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.value.transpose(axes)

    def bw(g):
        _accum(a, g.transpose(inv), own=True)

    return tape.record(out, (a,), bw)


def reshape(tape, a, shape):
    shape = tuple(shape)
    out = a.value.reshape(shape)

    def bw(g):
        _accum(a, np.ascontiguousarray(g).reshape(a.shape), own=True)

    return tape.record(out, (a,), bw)


def sum_(tape, a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(a.dtype, copy=False)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return tape.record(np.asarray(out), (a,), bw)


def mean(tape, a, axis=None, keepdims=False):
    if axis is None:
        n = a.value.size
    else:
        n = a.value.shape[axis]
    return scale(tape, sum_(tape, a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(tape, a):
    out = np.exp(a.value)

    def bw(g):
        _accum(a, g * out, own=True)

    return tape.record(out, (a,), bw)


def log(tape, a):
    out = np.log(a.value)

    def bw(g):
        _accum(a, g / a.value, own=True)

    return tape.record(out, (a,), bw)


def sqrt(tape, a):
    out = np.sqrt(a.value)

    def bw(g):
        _accum(a, g / (2.0 * out), own=True)

    return tape.record(out, (a,), bw)


def sin(tape, a):
    out = np.sin(a.value)

    def bw(g):
        _accum(a, g * np.cos(a.value), own=True)

    return tape.record(out, (a,), bw)


def cos(tape, a):
    out = np.cos(a.value)

    def bw(g):
        _accum(a, -g * np.sin(a.value), own=True)

    return tape.record(out, (a,), bw)


def tanh(tape, a):
    out = np.tanh(a.value)

    def bw(g):
        _accum(a, g * (1.0 - out * out), own=True)

    return tape.record(out, (a,), bw)


def softplus(tape, a):
    out = np.logaddexp(0.0, a.value)

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-a.value))
        _accum(a, g * sig, own=True)

    return tape.record(out, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(tape, a):
    """GELU, tanh approximation (smooth everywhere, erf-free)."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * d, own=True)

    return tape.record(out, (a,), bw)


def take_rows(tape, a, idx):
    """Gather rows along the first axis; backward scatter-adds."""
    idx = np.asarray(idx, dtype=int)
    out = a.value[idx]

    def bw(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g.astype(a.dtype, copy=False))
        _accum(a, ga, own=True)

    return tape.record(out, (a,), bw)


def where(tape, mask, a, b):
    """Piecewise select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _binary(tape, a, b)
    out = np.where(mask, a.value, b.value)

    def bw(g):
        _accum(a, _unbroadcast(np.where(mask, g, 0.0), a.shape).astype(a.dtype, copy=False), own=True)
        _accum(b, _unbroadcast(np.where(mask, 0.0, g), b.shape).astype(b.dtype, copy=False), own=True)

    return tape.record(out, (a, b), bw)


def softmax_rows(tape, a):
    """Row-stochastic softmax over the last axis, max-shifted for stability.

    Denominators accumulate at 64 bit; output rows sum to one within
    rounding of the storage dtype.
    """
    x = a.value
    if not np.all(np.isfinite(x)):
        raise ContractError("softmax_rows requires finite input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    den = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    e /= den.astype(x.dtype, copy=False)
    out = e

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True, dtype=np.float64)
        ga = g - dot.astype(x.dtype, copy=False)
        ga *= out
        _accum(a, ga, own=True)

    return tape.record(out, (a,), bw)


def scaled_softmax_qk(tape, q, k, inv_scale):
    """softmax(q kT * inv_scale) over keys, without retaining the raw scores.

    q: (..., m, w), k: (..., n, w) -> (..., m, n). Only the probability
    matrix is kept for the backward rule; the pre-softmax scores are a
    forward-pass temporary, which matters when m*n is large. The scale is
    folded into the (small) query matrix so no full-size scaling pass runs.
    """
    if q.value.shape[-1] != k.value.shape[-1]:
        raise DimensionError("query/key widths differ")
    qs = q.value * np.asarray(inv_scale, dtype=q.dtype)
    s = qs @ np.swapaxes(k.value, -1, -2)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    den = s.sum(axis=-1, keepdims=True, dtype=np.float64)
    s /= den.astype(s.dtype, copy=False)
    p = s

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True, dtype=np.float64)
        ds = g - dot.astype(p.dtype, copy=False)
        ds *= p
        gq = ds @ k.value
        gq *= np.asarray(inv_scale, dtype=gq.dtype)
        _accum(q, _unbroadcast(gq, q.shape).astype(q.dtype, copy=False), own=True)
        del gq
        gk = np.swapaxes(ds, -1, -2) @ qs
        del ds
        _accum(k, _unbroadcast(gk, k.shape).astype(k.dtype, copy=False), own=True)

    return tape.record(p, (q, k), bw)


def layer_norm(tape, x, gain, bias, eps):
    """Zero-mean unit-variance over the last axis, then affine."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.value.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs a feature axis")
    mu = x.value.mean(axis=-1, keepdims=True, dtype=np.float64)
    cent = x.value - mu.astype(x.dtype, copy=False)
    var = np.mean(cent.astype(np.float64) ** 2, axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = cent * inv
    out = xhat * gain.value + bias.value

    def bw(g):
        _accum(bias, _unbroadcast(g, bias.shape).astype(bias.dtype, copy=False))
        _accum(gain, _unbroadcast(g * xhat, gain.shape).astype(gain.dtype, copy=False), own=True)
        gx = g * gain.value
        m1 = gx.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype, copy=False)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype, copy=False)
        _accum(x, inv * (gx - m1 - xhat * m2), own=True)

    return tape.record(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over the given Parameters.

    Deterministic given identical inputs; iterates params in the order
    provided. Gradients are read from Parameter.grad and left untouched
    (callers reset them between steps).
    """
    if lr <= 0:
        raise ConfigError("adam learning rate must be positive")
    params = list(params)
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        g = p.grad
        if m.shape != g.shape:
            raise DimensionError(f"adam state shape mismatch for {p.name!r}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference(loss_fn, params, step=1e-5):
    """Central-difference gradient of loss_fn() for every entry of params.

    loss_fn takes no arguments and must read the Parameters' current
    values; the independent oracle side of every gradient check.
    """
    grads = {}
    for p in params:
        g = np.zeros_like(p.value, dtype=np.float64)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn())
            flat[i] = orig - step
            lo = float(loss_fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[p.name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a-n| / max(|a|, |n|, floor) over matching gradient dicts."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
