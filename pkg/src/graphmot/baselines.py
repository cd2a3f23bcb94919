"""Constant-velocity greedy tracker without learned components."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .geometry import Box3D, nms_indices
from .graph import association_edges, box_arrays, predicted_track_xy
from .matching import AffinityTable, MatchResult, greedy_match
from .tracker import TrackerConfig, TrackerState, TrackOutput, _emitted, to_outputs, update_tracks


def cv_match(state: TrackerState, dets: Sequence[Box3D], frame: int, dt: float, cfg: TrackerConfig) -> MatchResult:
    """Score-ordered greedy matching to the nearest same-class track inside the class gate.

    Tracks are extrapolated with their stored velocity; affinity is a
    monotone decreasing function of the predicted center distance so the
    shared greedy rule picks the closest free track.
    """
    centers, _, _, _, cls, scores = box_arrays(dets)
    track_xy = predicted_track_xy(state.tracks, frame, dt)
    track_cls = np.array([t.class_id for t in state.tracks], dtype=np.int64)
    t_idx, d_idx, dist = association_edges(track_xy, track_cls, centers[:, :2], cls, cfg.graph)
    table = AffinityTable(t_idx, d_idx, 1.0 / (1.0 + dist), scores, len(state.tracks))
    return greedy_match(table, min_affinity=0.0)


def cv_step(state: TrackerState, dets: Sequence[Box3D], frame: int, dt: float, cfg: TrackerConfig):
    kept = [dets[i] for i in nms_indices(list(dets), cfg.nms_iou)] if dets else []
    match = cv_match(state, kept, frame, dt, cfg)
    vel = np.array([k.velocity for k in kept], dtype=float).reshape(-1, 2)
    new_state, _, active = update_tracks(state, match, kept, vel, frame, cfg)
    return new_state, active


def cv_greedy_track(frames: Sequence[Sequence[Box3D]], cfg: Optional[TrackerConfig] = None, dt: float = 0.5) -> list[list[TrackOutput]]:
    """Track one sequence with detector velocities and greedy nearest-neighbour association."""
    cfg = cfg or TrackerConfig()
    cfg.validate()
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    state = TrackerState()
    out: list[list[TrackOutput]] = []
    for f, dets in enumerate(frames):
        state, active = cv_step(state, dets, f, dt, cfg)
        ts = dets[0].timestamp if dets else f * dt
        out.append(to_outputs(_emitted(state, active, cfg), f, ts, dt))
    return out
