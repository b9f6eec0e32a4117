"""Local reference frames from point neighborhoods.

A frame at a surface point is an ordered orthonormal basis
``(d1, d2, d3)``: ``d1`` is the least-squares plane normal of the
neighborhood, ``d2`` points toward the tangent-plane projection of the
farthest support point, and ``d3 = d1 x d2`` completes a right-handed
triple. The frame is encoded as the unit quaternion whose rotation takes
the canonical basis ``(e1, e2, e3)`` onto ``(d1, d2, d3)`` - the matrix
with the axes as columns - flipped onto the positive hemisphere.

Frames built this way rotate with the patch: applying ``g`` to the
points maps the quaternion ``q`` to ``g * q`` (as long as the farthest
point selection does not switch candidates).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import quat
from .errors import DegeneratePatchError, DegenerateTangentError

log = logging.getLogger(__name__)

# Relative eigenvalue gap below which the plane normal is ambiguous.
PLANE_GAP = 1e-9
TANGENT_EPS = 1e-9
FARTHEST_TIE_EPS = 1e-9


@dataclass
class Patch:
    """A surface neighborhood: a center, its K >= 3 support points, a radius."""

    center: np.ndarray
    points: np.ndarray  # (K, 3) world coordinates
    radius: float | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 3:
            raise ValueError(f"patch needs (K>=3, 3) points, got {self.points.shape}")
        dists = np.linalg.norm(self.points - self.center, axis=1)
        if self.radius is None:
            self.radius = float(np.max(dists))
        elif np.any(dists > self.radius * (1.0 + 1e-9)):
            # soft contract: support should fit in the radius
            log.debug("patch has %d points beyond its radius", int(np.sum(dists > self.radius)))


@dataclass
class LrfFrame:
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    q: np.ndarray


def fit_normal(patch: Patch, sign_ref: np.ndarray | None = None) -> np.ndarray:
    """Least-squares plane normal of the patch points.

    The normal is the eigenvector of the centered covariance with the
    smallest eigenvalue. Its sign is chosen to have nonnegative dot with
    ``sign_ref`` (typically center minus cloud centroid, making it point
    roughly outward); without a usable reference the tie-break prefers
    positive z, then y, then x components.

    Raises DegeneratePatchError when the two smallest covariance
    eigenvalues coincide within 1e-9 relative (no unique plane, e.g.
    collinear points).
    """
    # work in center-relative coordinates so translating the whole patch
    # cannot change a single bit of the fit
    offsets = patch.points - patch.center
    centered = offsets - offsets.mean(axis=0)
    cov = centered.T @ centered
    evals, evecs = np.linalg.eigh(cov)
    top = max(evals[2], 1e-300)
    if evals[1] - evals[0] <= PLANE_GAP * top:
        raise DegeneratePatchError(
            f"smallest covariance eigenvalues {evals[0]:.3e}, {evals[1]:.3e} do not "
            "define a plane"
        )
    normal = evecs[:, 0]
    return _fix_sign(normal, sign_ref)


def _fix_sign(normal: np.ndarray, sign_ref: np.ndarray | None) -> np.ndarray:
    if sign_ref is not None:
        d = float(normal @ np.asarray(sign_ref, dtype=np.float64))
        if abs(d) > 1e-12:
            return normal if d > 0 else -normal
    for comp in (2, 1, 0):
        if normal[comp] != 0.0:
            return normal if normal[comp] > 0 else -normal
    return normal


def flare_axis2(patch: Patch, normal: np.ndarray) -> np.ndarray:
    """Second axis: tangent-plane projection of the farthest support point.

    Candidates are visited by decreasing distance from the center (ties
    within 1e-9 broken toward the lowest point index and logged); a
    candidate whose tangential component is shorter than 1e-9 is skipped.
    Raises DegenerateTangentError when every candidate is degenerate.
    """
    offsets = patch.points - patch.center
    dists = np.linalg.norm(offsets, axis=1)
    order = np.argsort(-dists, kind="stable")
    if len(order) > 1 and dists[order[0]] - dists[order[1]] < FARTHEST_TIE_EPS:
        log.debug("ambiguous farthest point (tie within %g); taking lowest index",
                  FARTHEST_TIE_EPS)
    for idx in order:
        v = offsets[idx]
        tangential = v - (v @ normal) * normal
        norm = np.linalg.norm(tangential)
        if norm >= TANGENT_EPS:
            return tangential / norm
    raise DegenerateTangentError("no support point has a tangential component")


def build_lrf(patch: Patch, sign_ref: np.ndarray | None = None) -> LrfFrame:
    """Full frame: normal, farthest-point tangent axis, their cross product."""
    d1 = fit_normal(patch, sign_ref)
    d2 = flare_axis2(patch, d1)
    d3 = np.cross(d1, d2)
    d3 /= np.linalg.norm(d3)
    r = np.column_stack([d1, d2, d3])
    return LrfFrame(d1=d1, d2=d2, d3=d3, q=quat.quat_from_rotation3(r))


@dataclass
class CloudLrfs:
    """Per-point frames for a whole cloud; failed points are flagged."""

    quats: np.ndarray  # (N, 4); rows of failed points are NaN
    valid: np.ndarray  # (N,) bool
    failures: dict = field(default_factory=dict)  # error name -> count


def compute_cloud_lrfs(points: np.ndarray, k: int = 9) -> CloudLrfs:
    """Frames for every point from its k nearest neighbors (self included).

    Normal signs are referenced against the cloud centroid. Points whose
    neighborhoods are degenerate keep a NaN row and are counted in
    ``failures``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds cloud size {n}")
    centroid = points.mean(axis=0)
    quats = np.full((n, 4), np.nan)
    valid = np.zeros(n, dtype=bool)
    failures: dict[str, int] = {}

    # exact kNN, chunked so the distance matrix stays small
    chunk = max(1, min(n, 512))
    for start in range(0, n, chunk):
        block = points[start : start + chunk]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for row, i in enumerate(range(start, min(start + chunk, n))):
            patch = Patch(center=points[i], points=points[idx[row]])
            try:
                frame = build_lrf(patch, sign_ref=points[i] - centroid)
            except (DegeneratePatchError, DegenerateTangentError) as err:
                name = type(err).__name__
                failures[name] = failures.get(name, 0) + 1
                continue
            quats[i] = frame.q
            valid[i] = True
    return CloudLrfs(quats=quats, valid=valid, failures=failures)
