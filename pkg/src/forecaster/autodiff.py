"""Minimal deterministic reverse-mode autodiff over dense float64 matrices.

Every operation eagerly computes its forward value and, when gradients are
enabled, records a backward closure on the result node. ``backward`` replays
the recorded graph in reverse topological order exactly once; calling it again
on the same node raises :class:`StaleTapeError`.

The op set is intentionally small: just what a graph-sparsified
encoder-decoder transformer and its loss need. ``masked_matmul`` is the one
non-standard primitive: its weight gradient is multiplied by the binary mask,
so pruned entries receive exactly zero gradient.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import DimensionError, NonFiniteGradientError, StaleTapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (pure inference)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus optional gradient buffer and tape node."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_rule", "_spent")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward_rule = None
        self._spent = False

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: Tensor, parents, rule):
    """Attach a backward rule when recording is on and any parent needs grad."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = rule
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values + b.values)
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values - b.values)
    except ValueError:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), rule)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values * b.values)
    except ValueError:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _record(out, (a, b), rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values @ b.values)

    def rule(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _record(out, (a, b), rule)


def masked_matmul(weight, mask: np.ndarray, x) -> Tensor:
    """(weight * mask) @ x with the weight gradient zeroed at masked entries."""
    weight, x = as_tensor(weight), as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != weight.shape:
        raise DimensionError(f"masked_matmul: mask shape {mask.shape} != weight shape {weight.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("masked_matmul: mask entries must be 0 or 1")
    if weight.values.ndim != 2 or x.values.ndim not in (1, 2) or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"masked_matmul: incompatible shapes {weight.shape} and {x.shape}")
    effective = weight.values * mask
    out = Tensor(effective @ x.values)

    def rule(g):
        if x.values.ndim == 1:
            _accumulate(weight, np.outer(g, x.values) * mask)
        else:
            _accumulate(weight, (g @ x.values.T) * mask)
        _accumulate(x, effective.T @ g)

    return _record(out, (weight, x), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _record(out, tuple(tensors), rule)


def split(t, sizes, axis: int = 0):
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    t = as_tensor(t)
    if sum(sizes) != t.shape[axis]:
        raise DimensionError(f"split: sizes {tuple(sizes)} do not cover axis {axis} of shape {t.shape}")
    pieces = []
    lo = 0
    for n in sizes:
        hi = lo + n
        idx = [slice(None)] * t.values.ndim
        idx[axis] = slice(lo, hi)
        idx = tuple(idx)
        piece = Tensor(t.values[idx])

        def rule(g, idx=idx):
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.values)
                t.grad[idx] += g

        pieces.append(_record(piece, (t,), rule))
        lo = hi
    return pieces


def relu(t) -> Tensor:
    t = as_tensor(t)
    out = Tensor(np.maximum(t.values, 0.0))

    def rule(g):
        _accumulate(t, g * (t.values > 0.0))

    return _record(out, (t,), rule)


def absval(t) -> Tensor:
    t = as_tensor(t)
    out = Tensor(np.abs(t.values))

    def rule(g):
        _accumulate(t, g * np.sign(t.values))

    return _record(out, (t,), rule)


def softmax(t, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows of -inf logits become exact zeros."""
    t = as_tensor(t)
    shifted = t.values - np.max(t.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accumulate(t, (g - dot) * y)

    return _record(out, (t,), rule)


def layer_norm(t, gain, bias, axis: int = 0, eps: float = 1e-6) -> Tensor:
    """Normalize along ``axis`` to zero mean / unit variance, then scale and shift.

    ``gain`` and ``bias`` are 1-D with length ``t.shape[axis]``; they broadcast
    over the remaining axes.
    """
    t, gain, bias = as_tensor(t), as_tensor(gain), as_tensor(bias)
    d = t.shape[axis]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} must be ({d},) for input {t.shape}"
        )
    bshape = [1] * t.values.ndim
    bshape[axis] = d
    g_b = gain.values.reshape(bshape)
    b_b = bias.values.reshape(bshape)

    mean = t.values.mean(axis=axis, keepdims=True)
    centered = t.values - mean
    var = np.mean(centered * centered, axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(g_b * xhat + b_b)

    other_axes = tuple(i for i in range(t.values.ndim) if i != axis)

    def rule(g):
        gg = g * g_b
        m1 = np.mean(gg, axis=axis, keepdims=True)
        m2 = np.mean(gg * xhat, axis=axis, keepdims=True)
        _accumulate(t, (gg - m1 - xhat * m2) * inv_std)
        _accumulate(gain, np.sum(g * xhat, axis=other_axes))
        _accumulate(bias, np.sum(g, axis=other_axes))

    return _record(out, (t, gain, bias), rule)


def scale_by_vector(t, vec: np.ndarray, axis: int = 0) -> Tensor:
    """Multiply by a constant 1-D vector broadcast along ``axis``."""
    t = as_tensor(t)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != t.shape[axis]:
        raise DimensionError(f"scale_by_vector: vector shape {vec.shape} does not match axis {axis} of {t.shape}")
    bshape = [1] * t.values.ndim
    bshape[axis] = vec.shape[0]
    v_b = vec.reshape(bshape)
    out = Tensor(t.values * v_b)

    def rule(g):
        _accumulate(t, g * v_b)

    return _record(out, (t,), rule)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    out = Tensor(t.values.reshape(shape))

    def rule(g):
        _accumulate(t, g.reshape(t.shape))

    return _record(out, (t,), rule)


def transpose(t) -> Tensor:
    t = as_tensor(t)
    if t.values.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {t.shape}")
    out = Tensor(t.values.T)

    def rule(g):
        _accumulate(t, g.T)

    return _record(out, (t,), rule)


def sum_all(t) -> Tensor:
    t = as_tensor(t)
    out = Tensor(t.values.sum())

    def rule(g):
        _accumulate(t, np.full_like(t.values, float(g)))

    return _record(out, (t,), rule)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor) or loss.values.size != 1:
        raise DimensionError(f"backward: loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    if loss._spent:
        raise StaleTapeError("backward called twice on the same tape; re-run the forward pass first")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward_rule is not None:
            node._backward_rule(node.grad if node.grad is not None else np.zeros_like(node.values))
            node._spent = True


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a dict of named parameter tensors.

    Masked weights stay masked: their gradients are exactly zero, so both
    moment buffers stay zero and the update is 0 / (0 + eps) = 0.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
