"""Sparse detection, track and association graphs with their raw features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Box3D

EDGE_FEATURE_DIM = 9


def node_feature_dim(num_classes: int) -> int:
    return 10 + num_classes


@dataclass
class GraphBuildConfig:
    neighbor_radius: float = 10.0
    class_radii: list[float] = field(default_factory=lambda: [19.0, 4.0, 14.5])
    radius_multiplier: float = 1.0
    fully_connected_assoc: bool = False

    def validate(self) -> None:
        if self.neighbor_radius <= 0 or any(r <= 0 for r in self.class_radii) or self.radius_multiplier <= 0:
            raise ValueError("graph radii and radius_multiplier must be > 0")


def default_class_radii(max_speeds: Sequence[float], frame_period: float, max_age: int, margin: float = 1.0) -> list[float]:
    """Association gate per class: the farthest a class can travel while a track coasts, plus a margin."""
    return [float(v) * frame_period * max_age + margin for v in max_speeds]


@dataclass
class SparseGraph:
    """Directed edge list ``src -> dst``.

    For the association graph ``src`` indexes tracks and ``dst`` indexes
    detections, so ``num_src``/``num_dst`` differ; homogeneous graphs have
    ``num_src == num_dst``.
    """

    num_src: int
    num_dst: int
    src: np.ndarray
    dst: np.ndarray
    edge_features: Optional[np.ndarray] = None

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def num_nodes(self) -> int:
        return self.num_dst

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def radius_edges(xy: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs within ``radius`` including self-loops, sorted by (dst, src)."""
    n = len(xy)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    diff = xy[:, None, :] - xy[None, :, :]
    within = np.sqrt((diff * diff).sum(-1)) <= radius
    np.fill_diagonal(within, True)
    dst, src = np.nonzero(within)
    return src.astype(np.int64), dst.astype(np.int64)


def boxes_xy(boxes: Sequence[Box3D]) -> np.ndarray:
    return np.array([b.center[:2] for b in boxes], dtype=float).reshape(-1, 2)


def build_detection_graph(dets: Sequence[Box3D], cfg: GraphBuildConfig) -> SparseGraph:
    src, dst = radius_edges(boxes_xy(dets), cfg.neighbor_radius)
    return SparseGraph(len(dets), len(dets), src, dst)


def predicted_track_xy(tracks: Sequence, frame: int, dt: float) -> np.ndarray:
    """Constant-velocity extrapolation of each track's stored box to ``frame``."""
    if not tracks:
        return np.zeros((0, 2))
    xy = np.array([t.box.center[:2] for t in tracks], dtype=float)
    vel = np.array([t.velocity_est for t in tracks], dtype=float)
    gap = np.array([frame - t.last_update_frame for t in tracks], dtype=float)
    return xy + vel * (gap * dt)[:, None]


def build_track_graph(tracks: Sequence, cfg: GraphBuildConfig, frame: int = 0, dt: float = 0.0) -> SparseGraph:
    src, dst = radius_edges(predicted_track_xy(tracks, frame, dt), cfg.neighbor_radius)
    return SparseGraph(len(tracks), len(tracks), src, dst)


def association_edges(
    track_xy_pred: np.ndarray,
    track_cls: np.ndarray,
    det_xy: np.ndarray,
    det_cls: np.ndarray,
    cfg: GraphBuildConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class- and distance-gated track->detection edges, sorted by (det, track).

    Returns (track_index, det_index, predicted_center_distance).
    """
    nt, nd = len(track_xy_pred), len(det_xy)
    if nt == 0 or nd == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    diff = det_xy[:, None, :] - track_xy_pred[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))  # (nd, nt)
    same = det_cls[:, None] == track_cls[None, :]
    if cfg.fully_connected_assoc:
        ok = same
    else:
        radii = np.asarray(cfg.class_radii, dtype=float)[det_cls] * cfg.radius_multiplier
        ok = same & (dist <= radii[:, None])
    d_idx, t_idx = np.nonzero(ok)
    return t_idx.astype(np.int64), d_idx.astype(np.int64), dist[d_idx, t_idx]


def box_arrays(boxes: Sequence[Box3D]):
    """(centers (N,3), sizes (N,3), yaws (N,), velocities (N,2), classes (N,), scores (N,))."""
    n = len(boxes)
    centers = np.array([b.center for b in boxes], dtype=float).reshape(n, 3)
    sizes = np.array([b.size for b in boxes], dtype=float).reshape(n, 3)
    yaws = np.array([b.yaw for b in boxes], dtype=float).reshape(n)
    vels = np.array([b.velocity for b in boxes], dtype=float).reshape(n, 2)
    cls = np.array([b.class_id for b in boxes], dtype=np.int64).reshape(n)
    scores = np.array([b.score for b in boxes], dtype=float).reshape(n)
    return centers, sizes, yaws, vels, cls, scores


def edge_features(
    t_idx: np.ndarray,
    d_idx: np.ndarray,
    pred_dist: np.ndarray,
    track_centers: np.ndarray,
    track_sizes: np.ndarray,
    track_yaws: np.ndarray,
    track_frames: np.ndarray,
    det_centers: np.ndarray,
    det_sizes: np.ndarray,
    det_yaws: np.ndarray,
    frame: int,
) -> np.ndarray:
    """Raw 9-dim association edge features (detection minus stored track box)."""
    if len(t_idx) == 0:
        return np.zeros((0, EDGE_FEATURE_DIM))
    dpos = det_centers[d_idx] - track_centers[t_idx]
    dsize = det_sizes[d_idx] - track_sizes[t_idx]
    dyaw = det_yaws[d_idx] - track_yaws[t_idx]
    dyaw = np.pi - np.mod(np.pi - dyaw, 2 * np.pi)  # onto (-pi, pi]
    dframe = (frame - track_frames[t_idx]).astype(float)
    return np.concatenate([dpos, dsize, dyaw[:, None], dframe[:, None], pred_dist[:, None]], axis=1)


def build_association_graph(tracks: Sequence, dets: Sequence[Box3D], cfg: GraphBuildConfig, dt: float, frame: Optional[int] = None) -> SparseGraph:
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if frame is None:
        frame = dets[0].frame if dets else 0
    t_xy = predicted_track_xy(tracks, frame, dt)
    t_cls = np.array([t.class_id for t in tracks], dtype=np.int64)
    dc, ds, dy, _, d_cls, _ = box_arrays(dets)
    t_idx, d_idx, dist = association_edges(t_xy, t_cls, dc[:, :2], d_cls, cfg)
    tc, ts, ty, _, _, _ = box_arrays([t.box for t in tracks])
    t_frames = np.array([t.last_update_frame for t in tracks], dtype=np.int64)
    feats = edge_features(t_idx, d_idx, dist, tc, ts, ty, t_frames, dc, ds, dy, frame)
    return SparseGraph(len(tracks), len(dets), t_idx, d_idx, feats)


def detection_node_features(dets: Sequence[Box3D], num_classes: int, origin: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Raw node vectors: center (scene-local), size, yaw, velocity, one-hot class, score."""
    centers, sizes, yaws, vels, cls, scores = box_arrays(dets)
    return node_features_from_arrays(centers, sizes, yaws, vels, cls, scores, num_classes, origin)


def node_features_from_arrays(centers, sizes, yaws, vels, cls, scores, num_classes: int, origin=(0.0, 0.0)) -> np.ndarray:
    n = len(centers)
    if n and (cls.min() < 0 or cls.max() >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    local = centers.copy()
    local[:, 0] -= origin[0]
    local[:, 1] -= origin[1]
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), cls] = 1.0
    return np.concatenate([local, sizes, yaws[:, None], vels, onehot, scores[:, None]], axis=1)


def scene_origin(first_frame: Sequence[Box3D]) -> tuple[float, float]:
    if not first_frame:
        return (0.0, 0.0)
    xy = boxes_xy(first_frame).mean(axis=0)
    return (float(xy[0]), float(xy[1]))
