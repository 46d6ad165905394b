"""Minimal reverse-mode differentiation over dense numpy arrays.

A ``Tape`` records every operation applied to its ``Value``s in creation
order; ``Tape.backward`` replays the recorded adjoints in exact reverse
order, which is a valid topological order because values are immutable once
created. The operator set is exactly what the hop-interaction network needs;
there is no broadcasting or graph optimization beyond that.

Gradients flow into ``Parameter`` objects (persistent arrays with a gradient
slot) whenever a parameter was placed on the tape via ``Tape.param``. A tape
is single-use per training step: call ``reset`` (or build a new tape) before
the next backward pass.

Training runs in float32; ``dtype=np.float64`` exists for the
finite-difference checks at the bottom of this module.
"""

from __future__ import annotations

import numpy as np


class Parameter:
    """Named persistent array with a matching gradient slot."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Value:
    """One node of the computation: an array plus a lazily allocated adjoint.

    ``needs_grad=False`` (constant inputs such as the feature batch) prunes
    the backward sweep: adjoints are neither computed nor stored for the
    value, and ops guard the often-expensive adjoint arithmetic behind it.
    """

    __slots__ = ("data", "grad", "_vjp", "needs_grad")

    def __init__(self, data: np.ndarray, needs_grad: bool = True):
        self.data = data
        self.grad = None
        self._vjp = None  # closure propagating self.grad to the parents
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.needs_grad:
            return
        if self.grad is None:
            self.grad = np.array(g)  # first contribution: one copy, no zeros pass
        else:
            self.grad += g


class Tape:
    """Ordered operation record enabling one reverse sweep per step."""

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.training = training
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self._values: list[Value] = []
        self._param_leaves: list[tuple[Value, Parameter]] = []
        self._param_cache: dict[int, Value] = {}
        self._consumed = False
        self.live_bytes = 0
        self.peak_bytes = 0

    def _register(self, value: Value) -> Value:
        self._values.append(value)
        self.live_bytes += value.data.nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        return value

    def leaf(self, array: np.ndarray, needs_grad: bool = True) -> Value:
        """Place an input array on the tape; pass ``needs_grad=False`` for
        data whose adjoint nobody will read (prunes backward work)."""
        return self._register(Value(np.asarray(array, dtype=self.dtype), needs_grad))

    def const(self, array: np.ndarray) -> np.ndarray:
        """Constants never differentiated; kept as plain arrays."""
        return np.asarray(array, dtype=self.dtype)

    def param(self, parameter: Parameter) -> Value:
        """Place a parameter on the tape; repeated calls share one leaf."""
        cached = self._param_cache.get(id(parameter))
        if cached is not None:
            return cached
        value = self.leaf(parameter.data)
        self._param_leaves.append((value, parameter))
        self._param_cache[id(parameter)] = value
        return value

    def backward(self, loss: Value) -> None:
        """Accumulate d(loss)/d(param) into every reachable Parameter.grad."""
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape without reset")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True
        loss.accumulate(np.ones_like(loss.data))
        for value in reversed(self._values):
            if value._vjp is not None and value.grad is not None:
                value._vjp(value.grad)
        for value, parameter in self._param_leaves:
            if value.grad is not None:
                parameter.grad += value.grad.astype(parameter.grad.dtype, copy=False)

    def reset(self) -> None:
        self._values.clear()
        self._param_leaves.clear()
        self._param_cache.clear()
        self._consumed = False
        self.live_bytes = 0


def apply_op(tape: Tape, data: np.ndarray, parents: tuple, vjp) -> Value:
    """Low-level hook to define a fused operation (used by the loss module).

    The adjoint closure is dropped entirely when no parent wants a gradient.
    """
    needs = any(p.needs_grad for p in parents)
    value = Value(data, needs_grad=needs)
    if needs:
        value._vjp = vjp
    return tape._register(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(tape: Tape, a: Value, b: Value) -> Value:
    def vjp(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return apply_op(tape, a.data + b.data, (a, b), vjp)


def sub(tape: Tape, a: Value, b: Value) -> Value:
    def vjp(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(-_unbroadcast(g, b.shape))

    return apply_op(tape, a.data - b.data, (a, b), vjp)


def mul(tape: Tape, a: Value, b: Value) -> Value:
    ad, bd = a.data, b.data

    def vjp(g):
        if a.needs_grad:
            a.accumulate(_unbroadcast(g * bd, a.shape))
        if b.needs_grad:
            b.accumulate(_unbroadcast(g * ad, b.shape))

    return apply_op(tape, ad * bd, (a, b), vjp)


def div(tape: Tape, a: Value, b: Value) -> Value:
    ad, bd = a.data, b.data

    def vjp(g):
        if a.needs_grad:
            a.accumulate(_unbroadcast(g / bd, a.shape))
        if b.needs_grad:
            b.accumulate(_unbroadcast(-g * ad / (bd * bd), b.shape))

    return apply_op(tape, ad / bd, (a, b), vjp)


def add_scalar(tape: Tape, a: Value, c: float) -> Value:
    def vjp(g):
        a.accumulate(g)

    return apply_op(tape, a.data + tape.dtype.type(c), (a,), vjp)


def mul_scalar(tape: Tape, a: Value, c: float) -> Value:
    c = tape.dtype.type(c)

    def vjp(g):
        a.accumulate(g * c)

    return apply_op(tape, a.data * c, (a,), vjp)


def mul_const(tape: Tape, a: Value, c: np.ndarray) -> Value:
    """Elementwise product with a non-differentiated constant array."""
    c = tape.const(c)

    def vjp(g):
        if a.needs_grad:
            a.accumulate(_unbroadcast(g * c, a.shape))

    return apply_op(tape, a.data * c, (a,), vjp)


def sub_const(tape: Tape, a: Value, c: np.ndarray) -> Value:
    def vjp(g):
        a.accumulate(g)

    return apply_op(tape, a.data - tape.const(c), (a,), vjp)


def relu(tape: Tape, a: Value) -> Value:
    mask = a.data > 0

    def vjp(g):
        if a.needs_grad:
            a.accumulate(g * mask)

    return apply_op(tape, np.where(mask, a.data, tape.dtype.type(0)), (a,), vjp)


def sqrt(tape: Tape, a: Value) -> Value:
    out = np.sqrt(a.data)

    def vjp(g):
        a.accumulate(g / (2.0 * out))

    return apply_op(tape, out, (a,), vjp)


def reshape(tape: Tape, a: Value, shape: tuple) -> Value:
    old = a.shape

    def vjp(g):
        a.accumulate(g.reshape(old))

    return apply_op(tape, a.data.reshape(shape), (a,), vjp)


def flatten_tokens(tape: Tape, a: Value) -> Value:
    """(b, t, d) -> (b, t*d)."""
    b, t, d = a.shape
    return reshape(tape, a, (b, t * d))


def transpose2d(tape: Tape, a: Value) -> Value:
    def vjp(g):
        a.accumulate(g.T)

    return apply_op(tape, np.ascontiguousarray(a.data.T), (a,), vjp)


def swap_last2(tape: Tape, a: Value) -> Value:
    def vjp(g):
        a.accumulate(np.swapaxes(g, -1, -2))

    return apply_op(tape, np.swapaxes(a.data, -1, -2), (a,), vjp)


def concat(tape: Tape, parts: list[Value], axis: int = -1) -> Value:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            part.accumulate(piece)

    return apply_op(tape, np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(tape: Tape, a: Value, axis=None, keepdims: bool = False) -> Value:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, shape).astype(g.dtype, copy=False))

    return apply_op(tape, a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(tape: Tape, a: Value, axis=None, keepdims: bool = False) -> Value:
    total = reduce_sum(tape, a, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul_scalar(tape, total, 1.0 / float(count))


def mean_pool(tape: Tape, a: Value, axis: int = 1) -> Value:
    """Arithmetic mean over one axis (the hop/token axis in the model)."""
    n = a.shape[axis]

    def vjp(g):
        a.accumulate(np.broadcast_to(np.expand_dims(g / n, axis), a.shape).astype(g.dtype, copy=False))

    return apply_op(tape, a.data.mean(axis=axis), (a,), vjp)


def max_pool(tape: Tape, a: Value, axis: int = 1) -> Value:
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        if not a.needs_grad:
            return
        dx = np.zeros_like(a.data)
        np.put_along_axis(dx, idx, np.expand_dims(g, axis), axis=axis)
        a.accumulate(dx)

    return apply_op(tape, out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(tape: Tape, a: Value, b: Value) -> Value:
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul expects matching 2-d or 3-d stacks, got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if a.needs_grad:
            a.accumulate(g @ np.swapaxes(bd, -1, -2))
        if b.needs_grad:
            b.accumulate(np.swapaxes(ad, -1, -2) @ g)

    return apply_op(tape, ad @ bd, (a, b), vjp)


def linear(tape: Tape, x: Value, w: Value, bias: Value | None = None) -> Value:
    """x @ w (+ bias broadcast over rows); x must be 2-d."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"linear expects 2-d operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match output dim {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        if x.needs_grad:
            x.accumulate(g @ wd.T)
        if w.needs_grad:
            w.accumulate(xd.T @ g)
        if bias is not None and bias.needs_grad:
            bias.accumulate(g.sum(axis=0))

    parents = (x, w) if bias is None else (x, w, bias)
    return apply_op(tape, out, parents, vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(tape: Tape, x: Value, axis: int = -1) -> Value:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        x.accumulate(out * (g - inner))

    return apply_op(tape, out, (x,), vjp)


def logsumexp(tape: Tape, x: Value, axis: int = -1, keepdims: bool = False) -> Value:
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(soft * g)

    return apply_op(tape, out if keepdims else out.squeeze(axis), (x,), vjp)


def layer_norm(tape: Tape, x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    """Standardize the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(x.data.ndim - 1))

    def vjp(g):
        if gamma.needs_grad:
            gamma.accumulate((g * xhat).sum(axis=reduce_axes))
        if beta.needs_grad:
            beta.accumulate(g.sum(axis=reduce_axes))
        if x.needs_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv_std * term)

    return apply_op(tape, out, (x, gamma, beta), vjp)


def dropout(tape: Tape, x: Value, p: float) -> Value:
    """Inverted dropout; identity in evaluation mode or at p=0."""
    if p >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {p}")
    if not tape.training or p == 0.0:
        return x
    if tape.rng is None:
        raise RuntimeError("training-mode dropout needs a tape rng")
    scale = tape.dtype.type(1.0 / (1.0 - p))
    # the mask stays boolean (a quarter of the float footprint); uniforms are
    # drawn as float32 regardless of tape dtype
    keep = tape.rng.random(x.shape, dtype=np.float32) >= p

    def vjp(g):
        if x.needs_grad:
            x.accumulate((g * keep) * scale)

    return apply_op(tape, (x.data * keep) * scale, (x,), vjp)


def multi_head_attention(
    tape: Tape,
    tokens: Value,
    w_query: list[Value],
    w_key: list[Value],
    w_value: list[Value],
    return_weights: bool = False,
):
    """Self-attention over the token axis of a (b, t, d) stack.

    Per head: scores = Q K^T / sqrt(head_dim), row-softmaxed, applied to V.
    Heads are concatenated on the feature axis; there is no output
    projection. Head weight matrices must be d x (d/heads).
    """
    b, t, d = tokens.shape
    heads = len(w_query)
    if not (len(w_key) == len(w_value) == heads) or heads == 0:
        raise ValueError("need matching non-empty per-head weight lists")
    if d % heads != 0:
        raise ValueError(f"token dim {d} not divisible into {heads} heads")
    head_dim = w_query[0].shape[1]
    if any(w.shape != (d, head_dim) for w in (*w_query, *w_key, *w_value)):
        raise ValueError(f"per-head weights must all have shape ({d}, {head_dim})")
    flat = reshape(tape, tokens, (b * t, d))
    outs, weights = [], []
    inv_scale = 1.0 / np.sqrt(head_dim)
    for wq, wk, wv in zip(w_query, w_key, w_value):
        q = reshape(tape, linear(tape, flat, wq), (b, t, head_dim))
        k = reshape(tape, linear(tape, flat, wk), (b, t, head_dim))
        v = reshape(tape, linear(tape, flat, wv), (b, t, head_dim))
        scores = mul_scalar(tape, matmul(tape, q, swap_last2(tape, k)), inv_scale)
        attn = softmax(tape, scores, axis=-1)
        weights.append(attn.data)
        outs.append(matmul(tape, attn, v))
    out = outs[0] if heads == 1 else concat(tape, outs, axis=-1)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# finite-difference checking (float64 only; dropout must be disabled)


def finite_difference(f, arrays: list[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f()`` wrt each array.

    Perturbs the arrays in place and restores them; arrays must be float64
    for the quoted tolerances to hold.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """max over entries of |analytic - numeric| / max(1, |analytic|)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.abs(a))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
