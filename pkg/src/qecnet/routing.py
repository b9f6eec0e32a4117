"""Dynamic routing of quaternion capsule votes by rotation agreement.

Votes ``v[i, j] = q_i * t[i, j]`` propose poses for each output capsule
``j``. Routing initializes each output pose as the activation-weighted
chordal mean of its votes, then repeatedly reweights every vote by
``alpha_i * sigmoid(-delta(pose_j, v[i, j]))`` and re-averages. Because
the mean is left-equivariant and the distance left-invariant, rotating
all input poses by ``g`` rotates every output pose by ``g`` and leaves
the output activations untouched.

The final activation of capsule ``j`` is ``sigmoid(-mean distance)`` of
its votes, i.e. an inlier score in ``(0, 0.5]``. The normalizer is the
actual vote count ``L`` by default ("per_vote"); "paper_literal" divides
by the patch size ``K`` instead (requires ``patch_size`` on the config).

``dynamic_route_tensor`` is the differentiable implementation used by
the network; ``dynamic_route`` wraps it for plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quat
from .errors import AllZeroActivationsError, ShapeMismatchError

ACTIVATION_NORMS = ("per_vote", "paper_literal")


@dataclass
class Capsule:
    """A pose with an evidence score."""

    pose: np.ndarray  # (4,) unit, canonicalized
    activation: float  # in [0, 1]


@dataclass
class RoutingConfig:
    iterations: int = 3
    activation_norm: str = "per_vote"
    patch_size: int | None = None  # only consulted by "paper_literal"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("routing needs at least one iteration")
        if self.activation_norm not in ACTIVATION_NORMS:
            raise ValueError(f"activation_norm must be one of {ACTIVATION_NORMS}")


@dataclass
class RoutingDiagnostics:
    """Per-call record of numerically degenerate mean solves."""

    degenerate_capsules: list[int] = field(default_factory=list)


def compute_votes(poses, transforms) -> np.ndarray:
    """Votes ``q_i * t[i, j]`` for all input/output pairs, canonicalized.

    ``poses`` is ``(L, 4)`` (or a list of Capsules), ``transforms`` is
    ``(L, M, 4)``; the result is ``(L, M, 4)``.
    """
    if isinstance(poses, (list, tuple)) and poses and isinstance(poses[0], Capsule):
        poses = np.stack([c.pose for c in poses])
    poses = np.asarray(poses, dtype=np.float64)
    transforms = np.asarray(transforms, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[-1] != 4:
        raise ShapeMismatchError(f"poses must be (L, 4), got {poses.shape}")
    if transforms.ndim != 3 or transforms.shape[0] != poses.shape[0] or transforms.shape[-1] != 4:
        raise ShapeMismatchError(
            f"transforms must be (L, M, 4) with L={poses.shape[0]}, got {transforms.shape}"
        )
    votes = quat.hamilton_product(poses[:, None, :], transforms)
    return quat.canonicalize_hemisphere(votes)


def dynamic_route_tensor(
    votes: ad.Tensor,
    alpha: ad.Tensor,
    cfg: RoutingConfig,
    weight_fn=None,
    pose_trace: list | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable routing over batched votes.

    ``votes`` is ``(..., L, M, 4)`` and ``alpha`` is ``(..., L)``; returns
    poses ``(..., M, 4)`` and activations ``(..., M)``. ``weight_fn`` maps
    the distance tensor to agreement weights (test-only injection point;
    default ``sigmoid(-delta)``). ``pose_trace``, when given, collects a
    numpy snapshot of the pose after initialization and each iteration.
    """
    l_votes, m_out = votes.shape[-3], votes.shape[-2]
    if alpha.shape != votes.shape[:-3] + (l_votes,):
        raise ShapeMismatchError(f"alpha {alpha.shape} does not match votes {votes.shape}")
    if weight_fn is None:
        weight_fn = lambda delta: ad.sigmoid(ad.neg(delta))

    ndim = votes.data.ndim
    # (..., L, M, 4) -> (..., M, L, 4) so the mean reduces the vote axis
    axes = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
    votes_mj = ad.transpose(votes, axes)
    alpha_b = ad.reshape(alpha, alpha.shape[:-1] + (1, l_votes))

    pose = ad.quat_mean(votes_mj, alpha_b)
    degenerate_any = pose.aux.copy()
    if pose_trace is not None:
        pose_trace.append(pose.data.copy())
    for _ in range(cfg.iterations):
        delta = ad.geodesic(ad.reshape(pose, pose.shape[:-1] + (1, 4)), votes_mj)
        weights = ad.mul(alpha_b, weight_fn(delta))
        pose = ad.quat_mean(votes_mj, weights)
        degenerate_any |= pose.aux
        if pose_trace is not None:
            pose_trace.append(pose.data.copy())

    delta = ad.geodesic(ad.reshape(pose, pose.shape[:-1] + (1, 4)), votes_mj)
    if cfg.activation_norm == "per_vote":
        z = float(l_votes)
    else:
        if cfg.patch_size is None:
            raise ValueError("paper_literal normalization requires patch_size")
        z = float(cfg.patch_size)
    activation = ad.sigmoid(ad.mul(ad.tsum(delta, axis=-1), -1.0 / z))
    pose.aux = degenerate_any  # capsules that hit a degenerate mean at any step
    return pose, activation


def dynamic_route(
    votes: np.ndarray,
    alpha_in: np.ndarray,
    cfg: RoutingConfig | None = None,
    weight_fn=None,
    diagnostics: RoutingDiagnostics | None = None,
    pose_trace: list | None = None,
) -> list[Capsule]:
    """Route plain ``(L, M, 4)`` votes with activations ``(L,)`` to M capsules."""
    cfg = cfg or RoutingConfig()
    votes = np.asarray(votes, dtype=np.float64)
    alpha_in = np.asarray(alpha_in, dtype=np.float64)
    if votes.ndim != 3 or votes.shape[-1] != 4:
        raise ShapeMismatchError(f"votes must be (L, M, 4), got {votes.shape}")
    if alpha_in.shape != (votes.shape[0],):
        raise ShapeMismatchError(f"alpha shape {alpha_in.shape} vs L={votes.shape[0]}")
    if np.any(alpha_in < 0.0) or np.any(alpha_in > 1.0):
        raise ValueError("activations must lie in [0, 1]")
    if not np.any(alpha_in > 0.0):
        raise AllZeroActivationsError("all input activations are zero")

    pose_t, act_t = dynamic_route_tensor(
        ad.constant(votes), ad.constant(alpha_in), cfg, weight_fn=weight_fn,
        pose_trace=pose_trace,
    )
    if diagnostics is not None and pose_t.aux is not None:
        diagnostics.degenerate_capsules.extend(int(j) for j in np.nonzero(pose_t.aux)[0])
    return [Capsule(pose=pose_t.data[j].copy(), activation=float(act_t.data[j]))
            for j in range(votes.shape[1])]


def routing_complexity(l_votes: int, m_out: int, k_patch: int, iterations: int) -> int:
    """Closed-form operation count ``M (K + 2 (k + 1) L)`` for one routing call."""
    return m_out * (k_patch + 2 * (iterations + 1) * l_votes)


def routing_complexity_expanded(l_votes: int, m_out: int, k_patch: int, iterations: int) -> int:
    """The same count written as ``LM + M (K + 2kL + L)``; kept to document
    that the two published forms are algebraically identical."""
    return l_votes * m_out + m_out * (k_patch + iterations * 2 * l_votes + l_votes)
