"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine. Operations record themselves on an explicit
Tape in execution order, so walking the tape in reverse is already a
reverse-topological traversal of the graph. float32 is the training
dtype; float64 ("verification mode") is what the gradient checks use.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(RuntimeError):
    """Raised when a value that must be finite is not."""


_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Turn per-op finiteness checks on or off (off by default for speed)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """Dense n-dimensional array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; reverse order is reverse-topological."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []


_ACTIVE: Tape | None = None


@contextmanager
def tape():
    """Record operations executed in this context onto a fresh Tape."""
    global _ACTIVE
    prev = _ACTIVE
    t = Tape()
    _ACTIVE = t
    try:
        yield t
    finally:
        _ACTIVE = prev


@contextmanager
def no_grad():
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = None
    try:
        yield
    finally:
        _ACTIVE = prev


def _make(data, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = True
    if _ACTIVE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _ACTIVE.nodes.append(_Node(out, inputs, backward_fn))
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, t: Tape) -> None:
    """Propagate d(loss)/d(x) to every requires_grad leaf reachable on the tape.

    Gradients accumulate into .grad until explicitly reset, so two backward
    passes add their contributions.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(t.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _suffix_reduce(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the leading axes it gained by broadcasting over `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"{op}: shape {b.shape} is not a suffix of {a.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")

    def back(g):
        return g, _suffix_reduce(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")

    def back(g):
        return g, -_suffix_reduce(g, b.shape)

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")

    def back(g):
        return g * b.data, _suffix_reduce(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(g):
        return (g * s,)

    return _make(a.data * s, (a,), back)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def gelu(a: Tensor) -> Tensor:
    """Smooth activation (tanh form), kink-free so finite differences apply."""
    c = 0.7978845608028654  # sqrt(2/pi)
    x = a.data
    x2 = x * x
    th = np.tanh(c * (x + 0.044715 * x * x2))

    def back(g):
        du = c * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(0.5 * x * (1.0 + th), (a,), back)


# ---------------------------------------------------------------------------
# linear algebra / reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. `b` may be 2-D (shared weights) while `a` is batched."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    if b.ndim == 2:

        def back(g):
            ga = g @ b.data.T
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:

        def back(g):
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.swapaxes(-1, -2) @ g
            return ga, gb

    return _make(out, (a, b), back)


def transpose_last(a: Tensor) -> Tensor:
    def back(g):
        return (g.swapaxes(-1, -2),)

    return _make(a.data.swapaxes(-1, -2), (a,), back)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def back(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along an axis; backward scatter-adds (duplicate indices sum)."""
    idx = np.asarray(indices)
    if axis == 0:

        def back(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return (ga,)

        return _make(a.data[idx], (a,), back)
    if idx.ndim > 1:
        raise ShapeError("take: multi-dim indices only supported on axis 0")

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, g if idx.ndim == 0 else np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(np.take(a.data, idx, axis=axis), (a,), back)


def expand_rows(a: Tensor, n: int) -> Tensor:
    """Broadcast a new leading axis of size n; backward sums it away."""

    def back(g):
        return (g.sum(axis=0),)

    return _make(np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() / n,)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / n,)

    return _make(a.data.mean(axis=axis), (a,), back)


# ---------------------------------------------------------------------------
# normalizers and losses


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted); slices along `axis` sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * gain.data
        gvar = (gx_hat * xc * (-0.5) * inv**3).sum(axis=-1, keepdims=True)
        gmu = (-gx_hat * inv).sum(axis=-1, keepdims=True) + gvar * (-2.0 * xc).mean(
            axis=-1, keepdims=True
        )
        gx = gx_hat * inv + gvar * 2.0 * xc / d + gmu / d
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), back)


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-softmax probability of targets over non-ignored rows."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but targets shape {t.shape}")
    mask = np.ones(n, dtype=bool) if ignore_id is None else t != ignore_id
    if not mask.any():
        raise ValueError("cross_entropy: all positions ignored, mean undefined")
    bad = t[mask]
    if bad.min() < 0 or bad.max() >= v:
        raise ValueError(f"cross_entropy: target id out of range [0, {v})")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    tsafe = np.where(mask, t, 0)
    nll = lse - logits.data[np.arange(n), tsafe]
    count = int(mask.sum())
    loss = nll[mask].sum() / count

    def back(g):
        p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        p[np.arange(n), tsafe] -= 1.0
        p[~mask] = 0.0
        return (p * (g / count),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def multi_target_cross_entropy(logits: Tensor, target_sets) -> Tensor:
    """Mean over rows of the averaged -log softmax over each row's target set.

    With one target per row this is cross_entropy without ignores; multiple
    targets average their -log terms so the scale stays comparable.
    """
    if logits.ndim != 2:
        raise ShapeError(f"multi_target_cross_entropy expects 2-D logits, got {logits.shape}")
    n, v = logits.shape
    sets = [np.asarray(s, dtype=np.int64) for s in target_sets]
    if len(sets) != n:
        raise ShapeError(f"{n} logit rows but {len(sets)} target sets")
    for s in sets:
        if s.size == 0:
            raise ValueError("multi_target_cross_entropy: empty target set")
        if s.min() < 0 or s.max() >= v:
            raise ValueError(f"target id out of range [0, {v})")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    loss = sum(lse[i] - logits.data[i, s].mean() for i, s in enumerate(sets)) / n

    def back(g):
        p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        for i, s in enumerate(sets):
            np.add.at(p[i], s, -1.0 / s.size)
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back)
