"""Two-level capsule network over local reference frames.

Each layer canonicalizes its patch geometry with channel-wise rotation
averages, regresses per-point transform quaternions with a small shared
MLP, turns input poses into votes, and routes the votes to output
capsules. Rotating the input cloud (points and frames together) rotates
every capsule pose and leaves every activation unchanged - the property
is architectural and holds for arbitrary parameters.

Layer 1 runs over K-point patches around farthest-point-sampled pooling
centers (one frame channel per point, activations 1); layer 2 treats the
pooling centers as a single patch whose channels are layer-1 capsules
and emits one capsule per class. Classification reads the activations,
pose estimation reads the quaternion of the most activated capsule.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import lrf as lrf_mod
from . import quat
from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .errors import InsufficientPointsError, TrainingDivergedError
from .pointcloud import PointCloud, farthest_point_sampling, group_knn
from .routing import Capsule, RoutingConfig, dynamic_route_tensor

log = logging.getLogger(__name__)

HIDDEN_UNITS = 64


@dataclass
class QecLayerConfig:
    """One capsule layer: patch size K, input channels, output capsules."""

    k: int
    n_c: int
    m: int
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    weighted_channel_mean: bool = True  # weight channel averages by activations

    def __post_init__(self):
        if min(self.k, self.n_c, self.m) < 1:
            raise ValueError("layer dimensions must be positive")


@dataclass
class NetworkConfig:
    layers: list[QecLayerConfig]
    class_count: int
    lrf_points: int = 512
    pooling_centers: int = 64
    lrf_neighbors: int = 9
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if len(self.layers) != 2:
            raise ValueError("this architecture stacks exactly two capsule layers")
        first, second = self.layers
        if first.n_c != 1:
            raise ValueError("layer 1 must have one frame channel per point")
        if second.n_c != first.m:
            raise ValueError("layer channel counts must chain (layer2.n_c == layer1.m)")
        if second.k != self.pooling_centers:
            raise ValueError("layer 2 patch size must equal the pooling center count")
        if second.m != self.class_count:
            raise ValueError("layer 2 must emit one capsule per class")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


def default_config(class_count: int = 40, seed: int = 0) -> NetworkConfig:
    """Full-size configuration: 512 frames, 64 centers, K=9, 64 mid capsules."""
    return NetworkConfig(
        layers=[
            QecLayerConfig(k=9, n_c=1, m=64),
            QecLayerConfig(k=64, n_c=64, m=class_count),
        ],
        class_count=class_count,
        lrf_points=512,
        pooling_centers=64,
        seed=seed,
    )


def toy_config(class_count: int = 3, seed: int = 0) -> NetworkConfig:
    """Desk-scale configuration used by the toy experiments."""
    return NetworkConfig(
        layers=[
            QecLayerConfig(k=9, n_c=1, m=12),
            QecLayerConfig(k=16, n_c=12, m=class_count),
        ],
        class_count=class_count,
        lrf_points=192,
        pooling_centers=16,
        lrf_neighbors=10,
        seed=seed,
    )


@dataclass
class MlpParams:
    """Two fully connected layers regressing per-point transform quaternions."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    def tensors(self) -> list[ad.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class NetworkParams:
    """All trainable tensors, one transform kernel per layer."""

    def __init__(self, layers: list[MlpParams]):
        self.layers = layers

    @classmethod
    def init(cls, cfg: NetworkConfig, rng: np.random.Generator | None = None) -> "NetworkParams":
        """Near-identity start: last-layer weights are small and the bias
        pins every regressed quaternion at identity, so initial votes are
        the input poses and routing starts well-conditioned."""
        rng = rng or np.random.default_rng(cfg.seed)
        layers = []
        for lcfg in cfg.layers:
            fan_in = 3 * lcfg.n_c
            out_dim = lcfg.n_c * lcfg.m * 4
            w1 = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, HIDDEN_UNITS))
            b1 = np.zeros(HIDDEN_UNITS)
            w2 = rng.normal(0.0, 0.01, (HIDDEN_UNITS, out_dim))
            b2 = np.tile([1.0, 0.0, 0.0, 0.0], lcfg.n_c * lcfg.m)
            layers.append(
                MlpParams(
                    w1=ad.parameter(w1), b1=ad.parameter(b1),
                    w2=ad.parameter(w2), b2=ad.parameter(b2),
                )
            )
        return cls(layers)

    def tensors(self) -> list[ad.Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name in ("w1", "b1", "w2", "b2"):
                out[f"layer{i}.{name}"] = getattr(layer, name).data
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], n_layers: int) -> "NetworkParams":
        layers = []
        for i in range(n_layers):
            layers.append(
                MlpParams(**{name: ad.parameter(arrays[f"layer{i}.{name}"])
                             for name in ("w1", "b1", "w2", "b2")})
            )
        return cls(layers)


def parameter_count(cfg: NetworkConfig) -> tuple[int, list[int]]:
    """Total trainable scalars and the per-layer breakdown."""
    per_layer = []
    for lcfg in cfg.layers:
        fan_in = 3 * lcfg.n_c
        out_dim = lcfg.n_c * lcfg.m * 4
        per_layer.append(fan_in * HIDDEN_UNITS + HIDDEN_UNITS + HIDDEN_UNITS * out_dim + out_dim)
    return sum(per_layer), per_layer


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedCloud:
    """Static per-cloud geometry: patches are center-relative, frames attached."""

    patch_points: np.ndarray  # (P, K, 3)
    patch_quats: np.ndarray  # (P, K, 4)
    center_points: np.ndarray  # (P, 3) relative to the center centroid
    label: int | None = None
    orientation: np.ndarray | None = None


def prepare_cloud(cloud: PointCloud, cfg: NetworkConfig) -> PreparedCloud:
    """Frames, pooling centers, and patch membership for one cloud.

    Uses the cloud's own frames when present, otherwise computes them
    from ``lrf_neighbors``-point neighborhoods. Raises
    InsufficientPointsError when fewer than ``pooling_centers`` points
    carry a valid frame.
    """
    points = cloud.points
    quats = cloud.lrf_quats
    if points.shape[0] > cfg.lrf_points:
        keep = farthest_point_sampling(points, cfg.lrf_points, start="centroid_far")
        keep = np.sort(keep)
        points = points[keep]
        quats = None if quats is None else quats[keep]
    if quats is None:
        frames = lrf_mod.compute_cloud_lrfs(points, k=cfg.lrf_neighbors)
        points = points[frames.valid]
        quats = frames.quats[frames.valid]
    if points.shape[0] < cfg.pooling_centers:
        raise InsufficientPointsError(
            f"{points.shape[0]} framed points < {cfg.pooling_centers} pooling centers"
        )

    centers = farthest_point_sampling(points, cfg.pooling_centers, start="centroid_far")
    grouping = group_knn(points, centers, cfg.layers[0].k)
    center_xyz = points[centers]
    return PreparedCloud(
        patch_points=points[grouping.patches] - center_xyz[:, None, :],
        patch_quats=quat.canonicalize_hemisphere(quats[grouping.patches]),
        center_points=center_xyz - center_xyz.mean(axis=0),
        label=cloud.label,
        orientation=None if cloud.orientation is None else cloud.orientation.copy(),
    )


def rotate_prepared(prep: PreparedCloud, g: np.ndarray) -> PreparedCloud:
    """Rigidly rotate prepared geometry; equivalent to preparing a rotated cloud."""
    return PreparedCloud(
        patch_points=quat.rotate_point(g, prep.patch_points),
        patch_quats=quat.canonicalize_hemisphere(quat.hamilton_product(g, prep.patch_quats)),
        center_points=quat.rotate_point(g, prep.center_points),
        label=prep.label,
        orientation=None if prep.orientation is None
        else quat.hamilton_product(g, prep.orientation),
    )


# ---------------------------------------------------------------------------
# forward pass


def qec_layer(
    points: ad.Tensor,
    quats: ad.Tensor,
    alphas: ad.Tensor,
    params: MlpParams,
    lcfg: QecLayerConfig,
) -> tuple[ad.Tensor, ad.Tensor]:
    """One capsule layer over a batch of patches.

    Shapes: ``points`` (B, K, 3), ``quats`` (B, K, N_c, 4), ``alphas``
    (B, K, N_c); returns poses (B, M, 4) and activations (B, M).
    """
    b, k = points.shape[0], points.shape[1]
    n_c, m = lcfg.n_c, lcfg.m

    # channel-wise orientation candidates
    quats_ch = ad.transpose(quats, (0, 2, 1, 3))  # (B, N_c, K, 4)
    if lcfg.weighted_channel_mean:
        ch_weights = ad.transpose(alphas, (0, 2, 1))  # (B, N_c, K)
    else:
        ch_weights = ad.constant(np.ones((b, n_c, k)))
    mu = ad.quat_mean(quats_ch, ch_weights)  # (B, N_c, 4)

    if os.environ.get("QEC_SKIP_CANONICALIZATION") == "1":
        # test-only fault injection: skipping the alignment below breaks
        # rotation equivariance of everything downstream
        local = ad.reshape(points, (b, k, 1, 3))
        local = ad.add(local, ad.constant(np.zeros((b, k, n_c, 3))))
    else:
        # express patch coordinates in each channel's canonical orientation:
        # x' = mu^-1 * (0, x) * mu
        mu_row = ad.reshape(mu, (b, 1, n_c, 4))
        x4 = ad.reshape(ad.embed_pure_quat(points), (b, k, 1, 4))
        local = ad.vector_part(ad.hamilton(ad.hamilton(ad.quat_conjugate(mu_row), x4), mu_row))

    flat = ad.reshape(local, (b * k, n_c * 3))
    hidden = ad.relu(ad.add_bias(ad.matmul(flat, params.w1), params.b1))
    raw = ad.add_bias(ad.matmul(hidden, params.w2), params.b2)
    transforms = ad.normalize_last4(ad.reshape(raw, (b, k, n_c, m, 4)))

    votes = ad.canonicalize_last4(ad.hamilton(ad.reshape(quats, (b, k, n_c, 1, 4)), transforms))
    votes = ad.reshape(votes, (b, k * n_c, m, 4))
    vote_alphas = ad.reshape(alphas, (b, k * n_c))
    return dynamic_route_tensor(votes, vote_alphas, lcfg.routing)


@dataclass
class LatentCapsules:
    """Final per-class capsules: activations classify, poses orient."""

    poses: np.ndarray  # (C, 4)
    activations: np.ndarray  # (C,)
    diagnostics: dict = field(default_factory=dict)

    @property
    def capsules(self) -> list[Capsule]:
        return [Capsule(pose=p.copy(), activation=float(a))
                for p, a in zip(self.poses, self.activations)]


def forward_graph(
    prep: PreparedCloud, params: NetworkParams, cfg: NetworkConfig
) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable forward pass; returns pose (C, 4) and activation (C,) tensors."""
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    p, k = prep.patch_points.shape[:2]
    points1 = ad.constant(prep.patch_points.astype(dtype))
    quats1 = ad.constant(prep.patch_quats.astype(dtype)[:, :, None, :])
    alphas1 = ad.constant(np.ones((p, k, 1), dtype=dtype))
    poses1, acts1 = qec_layer(points1, quats1, alphas1, params.layers[0], cfg.layers[0])

    m1 = cfg.layers[0].m
    points2 = ad.constant(prep.center_points.astype(dtype)[None])
    quats2 = ad.reshape(poses1, (1, p, m1, 4))
    alphas2 = ad.reshape(acts1, (1, p, m1))
    poses2, acts2 = qec_layer(points2, quats2, alphas2, params.layers[1], cfg.layers[1])
    return ad.reshape(poses2, (cfg.class_count, 4)), ad.reshape(acts2, (cfg.class_count,))


def network_forward(
    data: PreparedCloud | PointCloud, params: NetworkParams, cfg: NetworkConfig
) -> LatentCapsules:
    """Forward pass to per-class latent capsules (plain arrays)."""
    prep = data if isinstance(data, PreparedCloud) else prepare_cloud(data, cfg)
    ad.reset_events()
    poses, acts = forward_graph(prep, params, cfg)
    return LatentCapsules(
        poses=np.asarray(poses.data, dtype=np.float64).copy(),
        activations=np.asarray(acts.data, dtype=np.float64).copy(),
        diagnostics={
            "degenerate_means": ad.events.degenerate_mean,
            "zero_norm_events": ad.events.zero_norm,
        },
    )


def classify(latent: LatentCapsules) -> int:
    """Most activated class; ties resolve to the lowest index."""
    return int(np.argmax(latent.activations))


def canonical_pose(latent: LatentCapsules) -> np.ndarray:
    """Absolute orientation readout: the best capsule's quaternion."""
    return quat.canonicalize_hemisphere(latent.poses[classify(latent)])


def siamese_relative_pose(latent_a: LatentCapsules, latent_b: LatentCapsules) -> np.ndarray:
    """Relative rotation between the most activated capsules of two clouds."""
    ia, ib = classify(latent_a), classify(latent_b)
    if ia != ib:
        log.warning("siamese inputs argmax to different classes (%d vs %d)", ia, ib)
    return quat.relative_rotation(latent_a.poses[ia], latent_b.poses[ib])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 8
    margin: float = 0.2
    margin_ramp: bool = False
    margin_final: float = 0.9
    siamese_weight: float = 1.0
    eval_every: int = 1


@dataclass
class TrainResult:
    params: NetworkParams
    records: list[dict]


def _margin_at(tcfg: TrainConfig, epoch: int) -> float:
    if not tcfg.margin_ramp or tcfg.epochs <= 1:
        return tcfg.margin
    frac = epoch / (tcfg.epochs - 1)
    return tcfg.margin + (tcfg.margin_final - tcfg.margin) * frac


def evaluate(
    params: NetworkParams, cfg: NetworkConfig, prepared: list[PreparedCloud]
) -> float:
    if not prepared:
        return float("nan")
    hits = sum(
        classify(network_forward(prep, params, cfg)) == prep.label for prep in prepared
    )
    return hits / len(prepared)


def train(
    train_clouds: list[PointCloud],
    cfg: NetworkConfig,
    tcfg: TrainConfig,
    val_clouds: list[PointCloud] = (),
    siamese_pairs: list[tuple[PointCloud, PointCloud, np.ndarray]] = (),
    log_path=None,
) -> TrainResult:
    """Margin-loss training on fixed-orientation clouds.

    Per epoch the records carry the mean loss, accuracy on ``val_clouds``
    as-is ("nr") and on a randomly rotated copy ("ar"), and the counts of
    degenerate mean solves (those gradients are refused, not crashed).
    ``siamese_pairs`` adds a relative-rotation loss between paired clouds
    whose ground-truth relative pose is known. Identical seeds give
    bitwise identical trajectories.
    """
    rng = np.random.default_rng(cfg.seed)
    params = NetworkParams.init(cfg, rng)
    prepared = [prepare_cloud(c, cfg) for c in train_clouds]
    prepared_val = [prepare_cloud(c, cfg) for c in val_clouds]
    prepared_pairs = [
        (prepare_cloud(a, cfg), prepare_cloud(b, cfg), np.asarray(g, dtype=np.float64))
        for a, b, g in siamese_pairs
    ]
    optimizer = ad.Adam(params.tensors(), lr=tcfg.lr)
    records: list[dict] = []

    n_train = len(prepared)
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        margin = _margin_at(tcfg, epoch)
        order = rng.permutation(n_train)
        ad.reset_events()
        losses = []
        for start in range(0, n_train, tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            optimizer.zero_grad()
            for idx in batch:
                prep = prepared[idx]
                _, acts = forward_graph(prep, params, cfg)
                loss = ad.spread_loss(acts, prep.label, margin)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, sample {idx} "
                        f"(degenerate means so far: {ad.events.degenerate_mean})"
                    )
                losses.append(value)
                loss.backward(np.asarray(1.0 / len(batch)))
            optimizer.step()

        pair_losses = []
        for prep_a, prep_b, g_rel in prepared_pairs:
            optimizer.zero_grad()
            poses_a, acts_a = forward_graph(prep_a, params, cfg)
            poses_b, acts_b = forward_graph(prep_b, params, cfg)
            ia = int(np.argmax(acts_a.data))
            ib = int(np.argmax(acts_b.data))
            rel = ad.hamilton(
                ad.reshape(ad.gather(poses_b, [ib]), (4,)),
                ad.quat_conjugate(ad.reshape(ad.gather(poses_a, [ia]), (4,))),
            )
            loss = ad.mul(ad.rotation_loss(rel, g_rel), tcfg.siamese_weight)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite siamese loss at epoch {epoch}")
            pair_losses.append(value)
            loss.backward()
            optimizer.step()

        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "margin": margin,
            "degenerate_means": ad.events.degenerate_mean,
            "zero_norm_events": ad.events.zero_norm,
            "seconds": round(time.perf_counter() - t0, 4),
        }
        if pair_losses:
            record["siamese_loss"] = float(np.mean(pair_losses))
        if prepared_val and (epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1):
            record["nr_accuracy"] = evaluate(params, cfg, prepared_val)
            g = quat.random_unit(np.random.default_rng(10_000 + epoch))
            rotated = [rotate_prepared(p, g) for p in prepared_val]
            record["ar_accuracy"] = evaluate(params, cfg, rotated)
        records.append(record)
        log.info("epoch %d: %s", epoch, record)

    if log_path is not None:
        atomic_write_text(log_path, "\n".join(json.dumps(r) for r in records) + "\n")
    return TrainResult(params=params, records=records)


# ---------------------------------------------------------------------------
# persistence


def config_to_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg)


def config_from_dict(data: dict) -> NetworkConfig:
    layers = [
        QecLayerConfig(
            k=ld["k"], n_c=ld["n_c"], m=ld["m"],
            routing=RoutingConfig(**ld["routing"]),
            weighted_channel_mean=ld.get("weighted_channel_mean", True),
        )
        for ld in data["layers"]
    ]
    rest = {k: v for k, v in data.items() if k != "layers"}
    return NetworkConfig(layers=layers, **rest)


def save_network(path, params: NetworkParams, cfg: NetworkConfig) -> None:
    save_checkpoint(path, config_to_dict(cfg), params.to_arrays())


def load_network(path) -> tuple[NetworkParams, NetworkConfig]:
    config_dict, arrays = load_checkpoint(path)
    cfg = config_from_dict(config_dict)
    return NetworkParams.from_arrays(arrays, len(cfg.layers)), cfg
