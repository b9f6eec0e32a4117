"""Quaternion algebra on numpy arrays.

Quaternions are stored ``[w, x, y, z]`` in float64 arrays of shape
``(..., 4)``; every function broadcasts over leading dimensions. A unit
quaternion and its negation encode the same rotation - functions that
promise a canonical representative route through
:func:`canonicalize_hemisphere`, everything else preserves sign.

Convention: ``rotate_point(q, x)`` applies the rotation actively,
``x' = q * (0, x) * conj(q)``, and ``rotation3_from_quat(q)`` is the
matrix of that same action, so its columns are the images of the
canonical basis vectors.
"""

from __future__ import annotations

import numpy as np

from .errors import NonOrthonormalInputError

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: np.ndarray) -> np.ndarray:
    """Scale quaternions to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def hamilton_product(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Hamilton product ``p * r``, renormalized, sign preserved."""
    return normalize(hamilton_raw(p, r))


def hamilton_raw(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Hamilton product without the unit-norm cleanup (any magnitudes)."""
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    rw, rx, ry, rz = r[..., 0], r[..., 1], r[..., 2], r[..., 3]
    return np.stack(
        [
            pw * rw - px * rx - py * ry - pz * rz,
            pw * rx + px * rw + py * rz - pz * ry,
            pw * ry - px * rz + py * rw + pz * rx,
            pw * rz + px * ry - py * rx + pz * rw,
        ],
        axis=-1,
    )


def conjugate(q: np.ndarray) -> np.ndarray:
    """Flip the sign of the vector part."""
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def inverse(q: np.ndarray) -> np.ndarray:
    """Inverse of a unit quaternion, which equals its conjugate."""
    return conjugate(q)


def to_matrix(q: np.ndarray) -> np.ndarray:
    """Left-multiplication matrix ``T(q)`` with ``T(p) @ r == p * r``.

    For unit input the result is orthonormal with determinant +1 and
    satisfies ``T + T.T == 2 * w * I``.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def geodesic_distance(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Angle between two rotations in radians, in ``[0, pi]``.

    Antipodal pairs are identified: ``d(q, -q) == 0``. The dot product is
    clamped to ``[-1, 1]`` so floating-point overshoot cannot reach the
    ``arccos`` domain edge.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    dot = np.abs(np.sum(q1 * q2, axis=-1))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


def rotate_point(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Rotate 3-vectors ``x`` by unit quaternions ``q`` (active)."""
    q = np.asarray(q, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    v = q[..., 1:4]
    w = q[..., 0:1]
    t = 2.0 * np.cross(v, x)
    return x + w * t + np.cross(v, t)


def canonicalize_hemisphere(q: np.ndarray) -> np.ndarray:
    """Flip sign so the first nonzero component of ``(w, x, y, z)`` is positive."""
    q = np.asarray(q, dtype=np.float64)
    s = np.sign(q[..., 0])
    for k in (1, 2, 3):
        s = np.where(s == 0.0, np.sign(q[..., k]), s)
    s = np.where(s == 0.0, 1.0, s)
    return q * s[..., None]


def relative_rotation(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Rotation taking frame A to frame B: ``qb * qa^-1``."""
    return hamilton_product(qb, inverse(qa))


def rae(q_est: np.ndarray, q_gt: np.ndarray) -> np.ndarray:
    """Relative angular error: geodesic distance scaled to ``[0, 1]``."""
    return geodesic_distance(q_est, q_gt) / np.pi


def rotation3_from_quat(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of the active rotation encoded by ``q``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    rows = [
        np.stack([1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)], axis=-1),
        np.stack([2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)], axis=-1),
        np.stack([2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_from_rotation3(r: np.ndarray) -> np.ndarray:
    """Quaternion of a proper rotation matrix, hemisphere-canonicalized.

    Raises NonOrthonormalInputError when ``max|R^T R - I| > 1e-6`` or the
    determinant is negative.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-2:] != (3, 3):
        raise NonOrthonormalInputError(f"expected (..., 3, 3) matrix, got {r.shape}")
    gram = np.einsum("...ji,...jk->...ik", r, r)
    err = np.max(np.abs(gram - np.eye(3)))
    if err > 1e-6:
        raise NonOrthonormalInputError(f"max|R^T R - I| = {err:.3e} exceeds 1e-6")
    if np.any(np.linalg.det(r) < 0.0):
        raise NonOrthonormalInputError("matrix has negative determinant (improper)")

    r00, r11, r22 = r[..., 0, 0], r[..., 1, 1], r[..., 2, 2]
    tr = r00 + r11 + r22

    def _safe_sqrt(v):
        return np.sqrt(np.maximum(v, 1e-300))

    # Four Shepperd branches, selected per element by the largest pivot.
    s0 = 2.0 * _safe_sqrt(1.0 + tr)
    c0 = np.stack(
        [
            0.25 * s0,
            (r[..., 2, 1] - r[..., 1, 2]) / s0,
            (r[..., 0, 2] - r[..., 2, 0]) / s0,
            (r[..., 1, 0] - r[..., 0, 1]) / s0,
        ],
        axis=-1,
    )
    s1 = 2.0 * _safe_sqrt(1.0 + r00 - r11 - r22)
    c1 = np.stack(
        [
            (r[..., 2, 1] - r[..., 1, 2]) / s1,
            0.25 * s1,
            (r[..., 0, 1] + r[..., 1, 0]) / s1,
            (r[..., 0, 2] + r[..., 2, 0]) / s1,
        ],
        axis=-1,
    )
    s2 = 2.0 * _safe_sqrt(1.0 - r00 + r11 - r22)
    c2 = np.stack(
        [
            (r[..., 0, 2] - r[..., 2, 0]) / s2,
            (r[..., 0, 1] + r[..., 1, 0]) / s2,
            0.25 * s2,
            (r[..., 1, 2] + r[..., 2, 1]) / s2,
        ],
        axis=-1,
    )
    s3 = 2.0 * _safe_sqrt(1.0 - r00 - r11 + r22)
    c3 = np.stack(
        [
            (r[..., 1, 0] - r[..., 0, 1]) / s3,
            (r[..., 0, 2] + r[..., 2, 0]) / s3,
            (r[..., 1, 2] + r[..., 2, 1]) / s3,
            0.25 * s3,
        ],
        axis=-1,
    )

    use0 = (tr > 0.0)[..., None]
    use1 = ((r00 >= r11) & (r00 >= r22))[..., None]
    use2 = (r11 >= r22)[..., None]
    q = np.where(use0, c0, np.where(use1, c1, np.where(use2, c2, c3)))
    return canonicalize_hemisphere(normalize(q))


def random_unit(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """Quaternions drawn uniformly on the full unit 3-sphere (not canonicalized)."""
    q = rng.standard_normal(shape + (4,))
    return normalize(q)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])
