"""Oriented 3D box math: IoU, ground-plane distance, NMS and constant-velocity prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np


def wrap_angle(angle: float) -> float:
    """Map an angle in radians onto (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a < 0.0:
        a += 2.0 * math.pi
    a -= math.pi
    # fmod lands exactly on -pi for odd multiples of pi
    if a <= -math.pi:
        a = math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (w, l, h)
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    score: float = 1.0
    frame: int = 0
    timestamp: float = 0.0
    gt_id: Optional[int] = None

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ValueError("Box3D expects center (3,), size (3,), velocity (2,)")
        if min(self.size) <= 0.0:
            raise ValueError(f"box size must be strictly positive, got {self.size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score must lie in [0, 1], got {self.score}")
        if self.frame < 0:
            raise ValueError(f"frame index must be >= 0, got {self.frame}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.center[:2])

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h


def bev_corners(box: Box3D) -> np.ndarray:
    """Counter-clockwise ground-plane corners, shape (4, 2).

    Length runs along the heading direction, width across it.
    """
    w, l, _ = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array(box.center[:2])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        prev_side = side(prev)
        for cur in inp:
            cur_side = side(cur)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=float).reshape(-1, 2)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return polygon_area(clip_convex(bev_corners(a), bev_corners(b)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    # cheap reject on bounding circles
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def center_distance(a: Box3D, b: Box3D) -> float:
    """Ground-plane (x, y) distance between box centers."""
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def overlap_candidates(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    """Boolean (len(a), len(b)) mask of pairs whose bounding circles intersect."""
    if not a or not b:
        return np.zeros((len(a), len(b)), dtype=bool)
    ca = np.array([x.center[:2] for x in a], dtype=float)
    cb = np.array([x.center[:2] for x in b], dtype=float)
    ra = 0.5 * np.hypot([x.size[0] for x in a], [x.size[1] for x in a])
    rb = 0.5 * np.hypot([x.size[0] for x in b], [x.size[1] for x in b])
    d = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1))
    return d < ra[:, None] + rb[None, :]


def nms_indices(detections: Sequence[Box3D], iou_threshold: float) -> list[int]:
    """Class-agnostic greedy suppression in descending score order; kept indices in original order.

    A box is kept when its IoU with every already kept box is at most the threshold.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    dets = list(detections)
    near = overlap_candidates(dets, dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(not near[i, k] or iou_3d(dets[i], dets[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return sorted(kept)


def nms(detections: Sequence[Box3D], iou_threshold: float) -> list[Box3D]:
    """Kept boxes in descending score order."""
    dets = list(detections)
    kept = nms_indices(dets, iou_threshold)
    return sorted((dets[i] for i in kept), key=lambda b: -b.score) if kept else []


def predict_box(box: Box3D, velocity: Sequence[float], dt: float) -> Box3D:
    if dt < 0.0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    x, y, z = box.center
    return replace(box, center=(x + velocity[0] * dt, y + velocity[1] * dt, z))
