"""Hard assignment between tracks, detections and ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box3D, overlap_candidates, iou_3d


@dataclass
class AffinityTable:
    """Sparse affinities between ``num_tracks`` tracks and the scored detections."""

    track_index: np.ndarray
    det_index: np.ndarray
    affinity: np.ndarray
    det_scores: np.ndarray
    num_tracks: int

    def __post_init__(self):
        self.track_index = np.asarray(self.track_index, dtype=np.int64)
        self.det_index = np.asarray(self.det_index, dtype=np.int64)
        self.affinity = np.asarray(self.affinity, dtype=float)
        self.det_scores = np.asarray(self.det_scores, dtype=float)
        if not (len(self.track_index) == len(self.det_index) == len(self.affinity)):
            raise ValueError("affinity table columns differ in length")
        if len(self.track_index):
            if self.track_index.min() < 0 or self.track_index.max() >= self.num_tracks:
                raise ValueError("track index out of range")
            if self.det_index.min() < 0 or self.det_index.max() >= len(self.det_scores):
                raise ValueError("detection index out of range")
            pairs = set(zip(self.track_index.tolist(), self.det_index.tolist()))
            if len(pairs) != len(self.track_index):
                raise ValueError("duplicate (track, detection) entry in affinity table")

    @property
    def num_dets(self) -> int:
        return len(self.det_scores)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (detection, track)
    unmatched_dets: list[int] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)

    def track_of(self) -> dict[int, int]:
        return {d: t for d, t in self.pairs}


def greedy_match(table: AffinityTable, min_affinity: float = 0.5) -> MatchResult:
    """Detections in descending score order each claim their best free track.

    Ties on detection score go to the lower detection index, ties on affinity
    to the lower track index.  A candidate must have affinity > ``min_affinity``.
    """
    if not 0.0 <= min_affinity < 1.0:
        raise ValueError(f"min_affinity must lie in [0, 1), got {min_affinity}")
    candidates: list[list[tuple[float, int]]] = [[] for _ in range(table.num_dets)]
    for t, d, a in zip(table.track_index.tolist(), table.det_index.tolist(), table.affinity.tolist()):
        if a > min_affinity:
            candidates[d].append((-a, t))
    taken = np.zeros(table.num_tracks, dtype=bool)
    result = MatchResult()
    order = sorted(range(table.num_dets), key=lambda i: (-table.det_scores[i], i))
    for d in order:
        best = None
        for neg_a, t in sorted(candidates[d]):
            if not taken[t]:
                best = t
                break
        if best is None:
            result.unmatched_dets.append(d)
        else:
            taken[best] = True
            result.pairs.append((d, best))
    result.unmatched_dets.sort()
    result.unmatched_tracks = [int(t) for t in np.flatnonzero(~taken)]
    return result


def hungarian(cost: np.ndarray, forbid: Optional[np.ndarray] = None) -> list[tuple[int, int]]:
    """Minimum-cost assignment over allowed cells, maximizing the number of assigned pairs first.

    Surplus rows or columns, and rows whose only options are forbidden, stay
    unassigned.  Returns sorted (row, col) pairs.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    if forbid is None:
        forbid = np.zeros(cost.shape, dtype=bool)
    forbid = np.asarray(forbid, dtype=bool)
    allowed = ~forbid
    if not allowed.any():
        return []
    if not np.all(np.isfinite(cost[allowed])):
        raise ValueError("allowed cells must have finite cost")
    # a forbidden cell costs more than any full assignment of allowed cells
    big = float(np.abs(cost[allowed]).sum()) * 2.0 + 1.0
    work = np.where(allowed, cost, big)
    rows, cols = linear_sum_assignment(work)
    return sorted((int(r), int(c)) for r, c in zip(rows, cols) if allowed[r, c])


def iou_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    for i, j in zip(*np.nonzero(overlap_candidates(a, b))):
        out[i, j] = iou_3d(a[i], b[j])
    return out


def assign_labels(dets: Sequence[Box3D], gts: Sequence[tuple[int, Box3D]], min_iou: float = 0.1) -> list[Optional[int]]:
    """Ground-truth id per detection from IoU-cost Hungarian matching; None marks a false positive.

    Pairs below ``min_iou`` or of different classes cannot be matched.
    """
    if not 0.0 < min_iou < 1.0:
        raise ValueError(f"min_iou must lie in (0, 1), got {min_iou}")
    labels: list[Optional[int]] = [None] * len(dets)
    if not dets or not gts:
        return labels
    gt_boxes = [g for _, g in gts]
    iou = iou_matrix(dets, gt_boxes)
    same_class = np.array([[d.class_id == g.class_id for g in gt_boxes] for d in dets])
    forbid = (iou < min_iou) | ~same_class
    for r, c in hungarian(1.0 - iou, forbid):
        labels[r] = gts[c][0]
    return labels


def assign_labels_by_distance(dets: Sequence[Box3D], gts: Sequence[tuple[int, Box3D]], max_distance: float = 2.0) -> list[Optional[int]]:
    """Like :func:`assign_labels` with ground-plane center distance as the matching cost.

    Pairs farther apart than ``max_distance`` or of different classes cannot be matched.
    """
    if max_distance <= 0.0:
        raise ValueError(f"max_distance must be > 0, got {max_distance}")
    labels: list[Optional[int]] = [None] * len(dets)
    if not dets or not gts:
        return labels
    d_xy = np.array([d.center[:2] for d in dets], dtype=float)
    g_xy = np.array([g.center[:2] for _, g in gts], dtype=float)
    dist = np.sqrt(((d_xy[:, None, :] - g_xy[None, :, :]) ** 2).sum(-1))
    same_class = np.array([[d.class_id == g.class_id for _, g in gts] for d in dets])
    forbid = (dist > max_distance) | ~same_class
    for r, c in hungarian(dist, forbid):
        labels[r] = gts[c][0]
    return labels


def edge_targets(assoc_track: np.ndarray, assoc_det: np.ndarray, det_labels: Sequence[Optional[int]], track_identities: Sequence[Optional[int]]) -> np.ndarray:
    """1 where the detection's gt id equals the track identity, else 0."""
    out = np.zeros(len(assoc_track))
    for e, (t, d) in enumerate(zip(assoc_track.tolist(), assoc_det.tolist())):
        g = det_labels[d]
        if g is not None and track_identities[t] == g:
            out[e] = 1.0
    return out
