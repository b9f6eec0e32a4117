"""Minimal reverse-mode differentiation over dense numpy arrays.

Just enough machinery to train transform kernels through quaternion
canonicalization, Hamilton products, eigenvector rotation averages,
unrolled routing iterations, and the losses - nothing more. Tensors wrap
float arrays; every operation records its parents and a backward closure.
``Tensor.backward`` replays the recorded operations in exact reverse
creation order (reverse topological order, visited once), so two
identical forward/backward passes produce bitwise identical gradients.

Ops broadcast like numpy; gradients are summed back down to each parent's
shape. Dtype follows the inputs: float64 is the default and what all
gradient checks run at, float32 is an opt-in for faster forward passes.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from . import mean as mean_mod
from . import quat as quat_mod
from .errors import BadTargetError, ShapeMismatchError

_NODE_COUNTER = itertools.count()

# Norm below which normalize_last4 refuses the gradient and emits identity.
ZERO_NORM_EPS = 1e-12
# |dot| clamp keeping the arccos derivative finite in geodesic gradients.
ACOS_GRAD_CLAMP = 1e-7


class _Events(threading.local):
    """Per-thread counters for numerically refused gradient events."""

    def __init__(self):
        self.zero_norm = 0
        self.degenerate_mean = 0


events = _Events()


def reset_events() -> None:
    events.zero_norm = 0
    events.degenerate_mean = 0


def _as_float(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array plus the tape links needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_order", "aux")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._order = next(_NODE_COUNTER)
        self.aux = None  # op-specific extras (e.g. degenerate-mean mask)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("implicit gradient only defined for scalars")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tensor] = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._order, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, pg in zip(node._parents, node._backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = pending.get(id(parent))
                    pending[id(parent)] = pg if acc is None else acc + pg
            else:
                node.grad = g.copy() if node.grad is None else node.grad + g


def parameter(data) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = constant(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for strictly positive ``a``."""
    a = constant(a)
    out = a.data**exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def add_bias(x, bias) -> Tensor:
    """Add a vector bias along the trailing axis."""
    x, bias = constant(x), constant(bias)
    if bias.data.shape != x.data.shape[-1:]:
        raise ShapeMismatchError(f"bias {bias.data.shape} vs input {x.data.shape}")
    return add(x, bias)


def relu(x) -> Tensor:
    x = constant(x)
    keep = x.data > 0.0
    return _node(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def sigmoid(x) -> Tensor:
    x = constant(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _node(out, (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = constant(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes) -> Tensor:
    x = constant(x)
    inverse = np.argsort(axes)
    return _node(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),)
    )


def gather(x, indices, axis: int = 0) -> Tensor:
    """Take rows/entries by integer index; the adjoint scatter-adds."""
    x = constant(x)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# quaternion ops


def embed_pure_quat(x) -> Tensor:
    """Lift 3-vectors to pure quaternions ``(0, x)``."""
    x = constant(x)
    out = np.concatenate([np.zeros(x.data.shape[:-1] + (1,), dtype=x.data.dtype), x.data], axis=-1)
    return _node(out, (x,), lambda g: (g[..., 1:4],))


def vector_part(q) -> Tensor:
    """Drop the scalar component of quaternions."""
    q = constant(q)

    def backward(g):
        gq = np.zeros(q.data.shape, dtype=g.dtype)
        gq[..., 1:4] = g
        return (gq,)

    return _node(q.data[..., 1:4].copy(), (q,), backward)


def quat_conjugate(q) -> Tensor:
    return mul(q, np.array([1.0, -1.0, -1.0, -1.0]))


def hamilton(p, r) -> Tensor:
    """Broadcasting Hamilton product (no renormalization)."""
    p, r = constant(p), constant(r)
    out = quat_mod.hamilton_raw(p.data, r.data)

    def backward(g):
        gp = quat_mod.hamilton_raw(g, quat_mod.conjugate(r.data))
        gr = quat_mod.hamilton_raw(quat_mod.conjugate(p.data), g)
        return (_unbroadcast(gp, p.data.shape), _unbroadcast(gr, r.data.shape))

    return _node(out, (p, r), backward)


def geodesic(p, r, grad_clamp: float = ACOS_GRAD_CLAMP) -> Tensor:
    """Rotation angle ``2 acos(|<p, r>|)`` along the trailing quaternion axis.

    The |dot| in the derivative is clamped to ``1 - grad_clamp`` so the
    arccos singularity at coincident rotations cannot blow up gradients.
    """
    p, r = constant(p), constant(r)
    dot = np.sum(p.data * r.data, axis=-1)
    out = 2.0 * np.arccos(np.clip(np.abs(dot), -1.0, 1.0))

    def backward(g):
        clipped = np.clip(dot, -(1.0 - grad_clamp), 1.0 - grad_clamp)
        dd = -2.0 * np.sign(dot) / np.sqrt(1.0 - clipped * clipped)
        gs = (g * dd)[..., None]
        return (_unbroadcast(gs * r.data, p.data.shape), _unbroadcast(gs * p.data, r.data.shape))

    return _node(out, (p, r), backward)


def normalize_last4(v) -> Tensor:
    """Unit-normalize trailing 4-vectors.

    Vectors with norm below 1e-12 become the identity quaternion with the
    gradient refused (zeroed); each such event is counted on ``events``.
    """
    v = constant(v)
    if v.data.shape[-1] != 4:
        raise ShapeMismatchError(f"expected trailing dimension 4, got {v.data.shape}")
    norm = np.linalg.norm(v.data, axis=-1, keepdims=True)
    dead = norm < ZERO_NORM_EPS
    n_dead = int(np.count_nonzero(dead))
    if n_dead:
        events.zero_norm += n_dead
    safe = np.where(dead, 1.0, norm)
    unit = v.data / safe
    if n_dead:
        unit = np.where(dead, np.array([1.0, 0.0, 0.0, 0.0]), unit)

    def backward(g):
        gv = (g - np.sum(g * unit, axis=-1, keepdims=True) * unit) / safe
        if n_dead:
            gv = np.where(dead, 0.0, gv)
        return (gv,)

    return _node(unit, (v,), backward)


def canonicalize_last4(q) -> Tensor:
    """Hemisphere sign fix; locally constant, so the gradient just flips."""
    q = constant(q)
    s = np.sign(q.data[..., 0])
    for k in (1, 2, 3):
        s = np.where(s == 0.0, np.sign(q.data[..., k]), s)
    s = np.where(s == 0.0, 1.0, s)[..., None]
    return _node(q.data * s, (q,), lambda g: (g * s,))


def quat_mean(quats, weights) -> Tensor:
    """Differentiable chordal mean over the second-to-last axis.

    ``quats`` is ``(..., Q, 4)``, ``weights`` broadcasts to ``(..., Q)``.
    Batch elements whose accumulator has a non-simple top eigenvalue keep
    their forward value but contribute zero gradient; the occurrences are
    counted on ``events`` and exposed as ``out.aux``.
    """
    quats, weights = constant(quats), constant(weights)
    w_full = np.broadcast_to(weights.data, quats.data.shape[:-1])
    v, vals, vecs, degen = mean_mod.weighted_mean_full(quats.data, w_full)
    n_degen = int(np.count_nonzero(degen))
    if n_degen:
        events.degenerate_mean += n_degen

    def backward(g):
        gq, gw = mean_mod.mean_backward(quats.data, w_full, v, vals, vecs, g, degen)
        return (gq, _unbroadcast(gw, weights.data.shape))

    out = _node(v, (quats, weights), backward)
    out.aux = degen
    return out


# ---------------------------------------------------------------------------
# losses


def spread_loss(activations, target: int, margin: float) -> Tensor:
    """Hinge-squared margin loss between the target activation and the rest."""
    activations = constant(activations)
    c = activations.data.shape[-1]
    if activations.data.ndim != 1:
        raise ShapeMismatchError("spread loss expects a flat activation vector")
    if not 0 <= target < c:
        raise BadTargetError(f"target {target} outside [0, {c})")
    onehot = np.zeros(c)
    onehot[target] = 1.0
    a_t = tsum(mul(activations, onehot))
    others = 1.0 - onehot
    hinge = mul(relu(add(sub(float(margin), a_t), activations)), others)
    return tsum(mul(hinge, hinge))


def rotation_loss(q_pred, q_gt) -> Tensor:
    """Geodesic distance to a target rotation (scalar)."""
    return geodesic(q_pred, constant(q_gt))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction over a list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: list[Tensor], optimizer: Adam) -> None:
    """Apply one optimizer step and clear gradients."""
    assert optimizer.params == params
    optimizer.step()
    optimizer.zero_grad()
