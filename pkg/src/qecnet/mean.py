"""Weighted quaternion averaging via the dominant eigenvector of a 4x4 accumulator.

The chordal mean of rotations ``{q_i}`` with weights ``{w_i}`` maximizes
``q^T M q`` over the unit sphere, where ``M = sum_i w_i q_i q_i^T``. The
maximizer is the eigenvector of ``M`` for the largest eigenvalue, which
makes the mean invariant to the sign of every input and left-equivariant:
averaging ``{g * q_i}`` gives ``g`` times the average of ``{q_i}``.

The eigensolver is a cyclic Jacobi sweep specialized to symmetric 4x4
matrices, vectorized over an arbitrary batch of leading dimensions. All
batch elements share the same pivot schedule so the control flow is
data-independent.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import quat
from .errors import AllZeroWeightsError, DegenerateSpectrumError, EmptyInputError

# Relative eigenvalue gap below which the dominant eigenvector is ambiguous.
DEGENERATE_GAP = 1e-9

_PIVOTS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def build_m(quats: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted sum of outer products ``sum_i w_i q_i q_i^T``.

    ``quats`` has shape ``(..., Q, 4)``; ``weights`` broadcasts to
    ``(..., Q)`` and defaults to ones. The result is symmetric positive
    semidefinite with trace equal to the weight sum.
    """
    quats = np.asarray(quats, dtype=np.float64)
    if quats.ndim < 2 or quats.shape[-1] != 4:
        raise EmptyInputError(f"expected (..., Q, 4) quaternions, got {quats.shape}")
    if quats.shape[-2] == 0:
        raise EmptyInputError("no quaternions to average")
    if weights is None:
        weights = np.ones(quats.shape[:-1])
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), quats.shape[:-1])
    if np.any(weights < 0.0):
        raise ValueError("weights must be nonnegative")
    if np.any(np.sum(weights, axis=-1) == 0.0):
        raise AllZeroWeightsError("weights sum to zero")
    return np.einsum("...q,...qi,...qj->...ij", weights, quats, quats)


def jacobi_eigh4(mats: np.ndarray, max_sweeps: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of symmetric 4x4 matrices by cyclic Jacobi rotations.

    Returns ``(vals, vecs)`` with eigenvalues sorted descending along the
    last axis and eigenvectors in the matching columns of ``vecs``. Sweeps
    run until the off-diagonal Frobenius norm of every batch element falls
    below ``1e-14`` relative to its total Frobenius norm (absolute 1e-12
    floor for near-zero matrices), which cyclic Jacobi reaches quadratically.
    """
    a = np.array(mats, dtype=np.float64, copy=True)
    if a.shape[-2:] != (4, 4):
        raise ValueError(f"expected (..., 4, 4), got {a.shape}")
    v = np.zeros_like(a)
    for i in range(4):
        v[..., i, i] = 1.0

    scale = np.maximum(np.linalg.norm(a, axis=(-2, -1)), 1.0)
    for _ in range(max_sweeps):
        # Summed directly over the entries: the ||A||^2 - ||diag||^2 form
        # cancels catastrophically and cannot see mass below sqrt(eps)*||A||.
        off_sq = sum(a[..., p, q] ** 2 for p, q in _PIVOTS)
        off = np.sqrt(2.0 * off_sq)
        if np.all(off <= 1e-14 * scale):
            break
        for p, q in _PIVOTS:
            apq = a[..., p, q]
            # Pivots far below the convergence threshold are no-ops; skipping
            # them also keeps theta below overflow range.
            active = np.abs(apq) > 1e-40 * scale
            if not np.any(active):
                continue
            app = a[..., p, p]
            aqq = a[..., q, q]
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            colp = a[..., :, p].copy()
            colq = a[..., :, q].copy()
            a[..., :, p] = c[..., None] * colp - s[..., None] * colq
            a[..., :, q] = s[..., None] * colp + c[..., None] * colq
            rowp = a[..., p, :].copy()
            rowq = a[..., q, :].copy()
            a[..., p, :] = c[..., None] * rowp - s[..., None] * rowq
            a[..., q, :] = s[..., None] * rowp + c[..., None] * rowq
            # The rotation annihilates the pivot exactly in real arithmetic.
            a[..., p, q] = np.where(active, 0.0, a[..., p, q])
            a[..., q, p] = a[..., p, q]

            vcolp = v[..., :, p].copy()
            vcolq = v[..., :, q].copy()
            v[..., :, p] = c[..., None] * vcolp - s[..., None] * vcolq
            v[..., :, q] = s[..., None] * vcolp + c[..., None] * vcolq

    vals = np.diagonal(a, axis1=-2, axis2=-1).copy()
    order = np.argsort(-vals, axis=-1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=-1)
    vecs = np.take_along_axis(v, order[..., None, :], axis=-1)
    return vals, vecs


class EigResult(NamedTuple):
    eigenvalue: float
    eigenvector: np.ndarray
    degenerate: bool


def eig_sym4_max(m: np.ndarray) -> EigResult:
    """Dominant eigenpair of a symmetric 4x4 matrix.

    The eigenvector is unit and hemisphere-canonicalized. ``degenerate``
    flags a top eigenvalue gap below ``1e-9`` relative - the vector is
    still returned (the caller decides what to do), but gradients through
    it are undefined.
    """
    vals, vecs, degen = _mean_eig_core(np.asarray(m, dtype=np.float64))
    return EigResult(float(vals[0]), quat.canonicalize_hemisphere(vecs[:, 0]), bool(degen))


def _mean_eig_core(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared eigensolve: sorted eigenpairs plus a degenerate-gap mask."""
    vals, vecs = jacobi_eigh4(m)
    top = vals[..., 0]
    gap = top - vals[..., 1]
    degenerate = gap <= DEGENERATE_GAP * np.maximum(np.abs(top), 1e-300)
    return vals, vecs, degenerate


def weighted_mean(quats: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Chordal average of unit quaternions, hemisphere-canonicalized.

    Accepts batches: ``quats`` of shape ``(..., Q, 4)`` with weights
    broadcastable to ``(..., Q)`` produce a ``(..., 4)`` result.
    """
    m = build_m(quats, weights)
    _, vecs, _ = _mean_eig_core(m)
    return quat.canonicalize_hemisphere(vecs[..., :, 0])


def weighted_mean_full(
    quats: np.ndarray, weights: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean plus the spectral data needed for gradients.

    Returns ``(mean, vals, vecs, degenerate)`` where ``vecs`` columns are
    sorted by descending eigenvalue and ``mean`` is the canonicalized
    first column.
    """
    m = build_m(quats, weights)
    vals, vecs, degenerate = _mean_eig_core(m)
    return quat.canonicalize_hemisphere(vecs[..., :, 0]), vals, vecs, degenerate


def mean_backward(
    quats: np.ndarray,
    weights: np.ndarray,
    mean: np.ndarray,
    vals: np.ndarray,
    vecs: np.ndarray,
    upstream: np.ndarray,
    degenerate: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate through the dominant eigenvector of the accumulator.

    Uses the simple-eigenpair identity ``dv = (lam I - M)^+ dM v`` with the
    pseudo-inverse taken in the eigenbasis and the ``v`` direction zeroed,
    chained through ``dM = w_i (dq_i q_i^T + q_i dq_i^T)`` and
    ``dM = dw_i q_i q_i^T``. Degenerate batch elements contribute zero.
    """
    quats = np.asarray(quats, dtype=np.float64)
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), quats.shape[:-1])
    inv_gap = np.zeros_like(vals[..., 1:])
    gaps = vals[..., 0:1] - vals[..., 1:]
    ok = ~degenerate
    np.divide(1.0, gaps, out=inv_gap, where=ok[..., None] & (gaps > 0))
    # Resolvent applied to the upstream vector: P u = sum_k u_k (u_k . u) / gap_k
    rest = vecs[..., :, 1:]
    coeff = np.einsum("...ik,...i->...k", rest, upstream) * inv_gap
    pu = np.einsum("...ik,...k->...i", rest, coeff)

    dot_qv = np.einsum("...qi,...i->...q", quats, mean)
    dot_qpu = np.einsum("...qi,...i->...q", quats, pu)
    grad_q = weights[..., None] * (
        dot_qv[..., None] * pu[..., None, :] + dot_qpu[..., None] * mean[..., None, :]
    )
    grad_w = dot_qpu * dot_qv
    if np.any(degenerate):
        grad_q = np.where(degenerate[..., None, None], 0.0, grad_q)
        grad_w = np.where(degenerate[..., None], 0.0, grad_w)
    return grad_q, grad_w


def weighted_mean_grad(
    quats: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``upstream . weighted_mean`` w.r.t. each quaternion and weight.

    Raises DegenerateSpectrumError when the top eigenvalue gap is below
    ``1e-9`` relative, in which case the derivative does not exist.
    """
    mean, vals, vecs, degenerate = weighted_mean_full(quats, weights)
    if np.any(degenerate):
        raise DegenerateSpectrumError(
            "dominant eigenvalue is not simple; eigenvector gradient undefined"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    return mean_backward(quats, weights, mean, vals, vecs, upstream, degenerate)
