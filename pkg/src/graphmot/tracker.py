"""Online tracking loop: graph building, model inference, matching and track life management.

The same code path serves inference and training.  Several independent
sequences can be stepped together: their graphs are concatenated into one
disjoint union so the model runs once per frame for the whole batch, which is
how clips of a training batch share a forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Box3D, nms_indices, predict_box
from .graph import (
    GraphBuildConfig,
    association_edges,
    box_arrays,
    edge_features,
    node_features_from_arrays,
    radius_edges,
)
from .matching import AffinityTable, MatchResult, greedy_match, hungarian
from .model import Dropout, ForwardOutput, GraphTransformer


@dataclass
class TrackerConfig:
    max_age: int = 3  # T_d
    min_affinity: float = 0.5
    score_decay: float = 0.9
    nms_iou: float = 0.1
    graph: GraphBuildConfig = field(default_factory=GraphBuildConfig)
    use_hungarian: bool = False
    gt_identity_guided: bool = False
    no_hidden_state: bool = False
    zero_edge_features: bool = False
    no_velocity_head: bool = False
    emit_inactive: bool = True  # coasting tracks are reported at their predicted position

    def validate(self) -> None:
        if self.max_age < 1:
            raise ValueError(f"max_age must be >= 1, got {self.max_age}")
        if not 0.0 <= self.min_affinity < 1.0:
            raise ValueError("min_affinity must lie in [0, 1)")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie in (0, 1)")
        self.graph.validate()


@dataclass
class Track:
    id: int
    box: Box3D
    velocity_est: tuple[float, float]
    last_update_frame: int
    age_since_match: int
    class_id: int
    score: float
    feature: Optional[np.ndarray] = None
    identity: Optional[int] = None  # ground-truth id, used only for training targets


@dataclass
class TrackerState:
    """Live tracks plus their feature matrix (row ``i`` belongs to ``tracks[i]``)."""

    tracks: list[Track] = field(default_factory=list)
    features: Optional[Tensor] = None
    next_id: int = 0
    origin: Optional[tuple[float, float]] = None


@dataclass
class TrackOutput:
    frame: int
    timestamp: float
    id: int
    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float]
    score: float


@dataclass
class CarryPlan:
    """Which rows of this frame's network outputs become next frame's track features.

    New track order is ``det_rows`` (matched then spawned) followed by
    ``track_rows`` (inactive tracks kept alive).
    """

    det_rows: np.ndarray
    track_rows: np.ndarray


@dataclass
class FrameInputs:
    """Geometry of one frame for a batch of sequences, concatenated with offsets."""

    dets: list[list[Box3D]]  # NMS survivors per sequence
    det_offsets: np.ndarray  # (B+1,)
    track_offsets: np.ndarray  # (B+1,)
    edge_offsets: np.ndarray  # (B+1,)
    det_raw: np.ndarray
    det_src: np.ndarray
    det_dst: np.ndarray
    track_src: np.ndarray
    track_dst: np.ndarray
    assoc_track: np.ndarray
    assoc_det: np.ndarray
    edge_raw: np.ndarray
    det_scores: np.ndarray
    frames: list[int]

    @property
    def batch_size(self) -> int:
        return len(self.dets)

    @property
    def num_dets(self) -> int:
        return int(self.det_offsets[-1])

    @property
    def num_tracks(self) -> int:
        return int(self.track_offsets[-1])

    def edge_slice(self, b: int) -> slice:
        return slice(int(self.edge_offsets[b]), int(self.edge_offsets[b + 1]))


def _offsets(counts: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


def prepare_frame(
    states: Sequence[TrackerState],
    detections: Sequence[Sequence[Box3D]],
    frames: Sequence[int],
    dt: float,
    cfg: TrackerConfig,
    num_classes: int,
) -> FrameInputs:
    """NMS, node/edge features and graph structure for every sequence in the batch.

    Sets ``state.origin`` on a sequence's first non-empty frame.
    """
    kept_all, raws, dsrc, ddst, tsrc, tdst, at, adt, eraw, scores = [], [], [], [], [], [], [], [], [], []
    det_counts, track_counts, edge_counts = [], [], []
    d_off = t_off = 0
    for state, dets, frame in zip(states, detections, frames):
        dets = list(dets)
        kept = [dets[i] for i in nms_indices(dets, cfg.nms_iou)] if dets else []
        if state.origin is None and kept:
            xy = np.array([b.center[:2] for b in kept]).mean(axis=0)
            state.origin = (float(xy[0]), float(xy[1]))
        origin = state.origin or (0.0, 0.0)
        kept_all.append(kept)
        nd, nt = len(kept), len(state.tracks)
        centers, sizes, yaws, vels, cls, sc = box_arrays(kept)
        raws.append(node_features_from_arrays(centers, sizes, yaws, vels, cls, sc, num_classes, origin))
        scores.append(sc)
        s, d = radius_edges(centers[:, :2], cfg.graph.neighbor_radius)
        dsrc.append(s + d_off)
        ddst.append(d + d_off)

        if nt:
            tb = [t.box for t in state.tracks]
            tc, ts, ty, _, tcls, _ = box_arrays(tb)
            tvel = np.array([t.velocity_est for t in state.tracks], dtype=float)
            tframes = np.array([t.last_update_frame for t in state.tracks], dtype=np.int64)
            t_pred = tc[:, :2] + tvel * ((frame - tframes) * dt)[:, None]
            s, d = radius_edges(t_pred, cfg.graph.neighbor_radius)
            tsrc.append(s + t_off)
            tdst.append(d + t_off)
            ti, di, dist = association_edges(t_pred, tcls, centers[:, :2], cls, cfg.graph)
            feats = edge_features(ti, di, dist, tc, ts, ty, tframes, centers, sizes, yaws, frame)
            if cfg.zero_edge_features:
                feats = np.zeros_like(feats)
            at.append(ti + t_off)
            adt.append(di + d_off)
            eraw.append(feats)
        else:
            at.append(np.zeros(0, dtype=np.int64))
            adt.append(np.zeros(0, dtype=np.int64))
            eraw.append(np.zeros((0, 9)))
        det_counts.append(nd)
        track_counts.append(nt)
        edge_counts.append(len(at[-1]))
        d_off += nd
        t_off += nt

    def cat(parts, dtype=np.int64):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    return FrameInputs(
        dets=kept_all,
        det_offsets=_offsets(det_counts),
        track_offsets=_offsets(track_counts),
        edge_offsets=_offsets(edge_counts),
        det_raw=np.concatenate(raws, axis=0) if raws else np.zeros((0, 10 + num_classes)),
        det_src=cat(dsrc),
        det_dst=cat(ddst),
        track_src=cat(tsrc),
        track_dst=cat(tdst),
        assoc_track=cat(at),
        assoc_det=cat(adt),
        edge_raw=np.concatenate(eraw, axis=0) if eraw else np.zeros((0, 9)),
        det_scores=cat(scores, float),
        frames=list(frames),
    )


def stack_features(states: Sequence[TrackerState]) -> Optional[Tensor]:
    feats = [s.features for s in states if s.features is not None and len(s.tracks)]
    if not feats:
        return None
    return feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)


def run_model(model: GraphTransformer, inputs: FrameInputs, track_feat: Optional[Tensor], dropout: Optional[Dropout] = None) -> Optional[ForwardOutput]:
    if inputs.num_dets == 0:
        if track_feat is None:
            return None
        h_track = model.encode_tracks(track_feat, inputs.track_src, inputs.track_dst, dropout)
        empty = Tensor(np.zeros((0, model.cfg.d)))
        return ForwardOutput(empty, h_track, empty, empty, Tensor(np.zeros(0)), Tensor(np.zeros((0, 2))), [])
    return model.forward(
        inputs.det_raw,
        inputs.det_src,
        inputs.det_dst,
        track_feat,
        inputs.track_src,
        inputs.track_dst,
        inputs.assoc_track,
        inputs.assoc_det,
        inputs.edge_raw,
        dropout,
    )


def affinity_table(inputs: FrameInputs, b: int, affinity: np.ndarray) -> AffinityTable:
    sl = inputs.edge_slice(b)
    d0, d1 = inputs.det_offsets[b], inputs.det_offsets[b + 1]
    return AffinityTable(
        track_index=inputs.assoc_track[sl] - inputs.track_offsets[b],
        det_index=inputs.assoc_det[sl] - d0,
        affinity=affinity[sl],
        det_scores=inputs.det_scores[d0:d1],
        num_tracks=int(inputs.track_offsets[b + 1] - inputs.track_offsets[b]),
    )


def hungarian_match(table: AffinityTable, min_affinity: float) -> MatchResult:
    """Maximum-total-affinity assignment over graph edges above ``min_affinity``."""
    cost = np.zeros((table.num_dets, table.num_tracks))
    forbid = np.ones_like(cost, dtype=bool)
    keep = table.affinity > min_affinity
    cost[table.det_index[keep], table.track_index[keep]] = -table.affinity[keep]
    forbid[table.det_index[keep], table.track_index[keep]] = False
    pairs = hungarian(cost, forbid) if cost.size else []
    matched_d = {d for d, _ in pairs}
    matched_t = {t for _, t in pairs}
    return MatchResult(
        pairs=[(d, t) for d, t in pairs],
        unmatched_dets=[d for d in range(table.num_dets) if d not in matched_d],
        unmatched_tracks=[t for t in range(table.num_tracks) if t not in matched_t],
    )


def identity_match(tracks: Sequence[Track], det_labels: Sequence[Optional[int]], det_scores: np.ndarray) -> MatchResult:
    """Match detections to tracks sharing their ground-truth identity."""
    by_identity: dict[int, list[int]] = {}
    for j, t in enumerate(tracks):
        if t.identity is not None:
            by_identity.setdefault(t.identity, []).append(j)
    for ids in by_identity.values():
        ids.sort(key=lambda j: (tracks[j].age_since_match, j))
    taken: set[int] = set()
    result = MatchResult()
    for d in sorted(range(len(det_labels)), key=lambda i: (-det_scores[i], i)):
        g = det_labels[d]
        cand = [j for j in by_identity.get(g, []) if j not in taken] if g is not None else []
        if cand:
            taken.add(cand[0])
            result.pairs.append((d, cand[0]))
        else:
            result.unmatched_dets.append(d)
    result.unmatched_dets.sort()
    result.unmatched_tracks = [j for j in range(len(tracks)) if j not in taken]
    return result


def decide(
    inputs: FrameInputs,
    b: int,
    state: TrackerState,
    affinity: np.ndarray,
    cfg: TrackerConfig,
    det_labels: Optional[Sequence[Optional[int]]] = None,
) -> MatchResult:
    if cfg.gt_identity_guided and det_labels is not None:
        d0, d1 = inputs.det_offsets[b], inputs.det_offsets[b + 1]
        return identity_match(state.tracks, det_labels, inputs.det_scores[d0:d1])
    table = affinity_table(inputs, b, affinity)
    if cfg.use_hungarian:
        return hungarian_match(table, cfg.min_affinity)
    return greedy_match(table, cfg.min_affinity)


def update_tracks(
    state: TrackerState,
    match: MatchResult,
    dets: Sequence[Box3D],
    det_velocities: np.ndarray,
    frame: int,
    cfg: TrackerConfig,
    det_labels: Optional[Sequence[Optional[int]]] = None,
) -> tuple[TrackerState, CarryPlan, list[Track]]:
    """Apply the match to the track set.

    Returns the new state (features not yet filled in), the carry plan that
    selects next-frame features, and the tracks active in this frame.
    """
    new_tracks: list[Track] = []
    det_rows: list[int] = []
    next_id = state.next_id
    for d, j in sorted(match.pairs):
        old = state.tracks[j]
        det = dets[d]
        new_tracks.append(
            replace(
                old,
                box=det,
                velocity_est=tuple(float(v) for v in det_velocities[d]),
                last_update_frame=frame,
                age_since_match=0,
                score=det.score,
                feature=None,
            )
        )
        det_rows.append(d)
    for d in sorted(match.unmatched_dets):
        det = dets[d]
        new_tracks.append(
            Track(
                id=next_id,
                box=det,
                velocity_est=tuple(float(v) for v in det_velocities[d]),
                last_update_frame=frame,
                age_since_match=0,
                class_id=det.class_id,
                score=det.score,
                identity=det_labels[d] if det_labels is not None else None,
            )
        )
        det_rows.append(d)
        next_id += 1
    active = list(new_tracks)
    track_rows: list[int] = []
    for j in sorted(match.unmatched_tracks):
        old = state.tracks[j]
        if old.age_since_match + 1 < cfg.max_age:
            new_tracks.append(replace(old, age_since_match=old.age_since_match + 1, score=old.score * cfg.score_decay, feature=None))
            track_rows.append(j)
    plan = CarryPlan(np.array(det_rows, dtype=np.int64), np.array(track_rows, dtype=np.int64))
    return TrackerState(tracks=new_tracks, features=None, next_id=next_id, origin=state.origin), plan, active


def carry_features(
    plan: CarryPlan,
    det_source: Optional[Tensor],
    det_offset: int,
    track_source: Optional[Tensor],
    track_offset: int,
) -> Optional[Tensor]:
    parts = []
    if len(plan.det_rows):
        parts.append(ad.row_gather(det_source, plan.det_rows + det_offset))
    if len(plan.track_rows):
        parts.append(ad.row_gather(track_source, plan.track_rows + track_offset))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def feature_sources(out: Optional[ForwardOutput], track_in: Optional[Tensor], cfg: TrackerConfig):
    """(detection-side, track-side) tensors that next-frame track features are drawn from."""
    if out is None:
        return None, None
    if cfg.no_hidden_state:
        return out.h_det0, track_in
    return out.h_det, out.h_track


@dataclass
class BatchStep:
    inputs: FrameInputs
    output: Optional[ForwardOutput]
    matches: list[MatchResult]
    plans: list[CarryPlan]
    track_identities: list[list[Optional[int]]]  # before the update, per sequence
    active: list[list[Track]]


def step_batch(
    model: GraphTransformer,
    states: list[TrackerState],
    detections: Sequence[Sequence[Box3D]],
    frames: Sequence[int],
    dt: float,
    cfg: TrackerConfig,
    dropout: Optional[Dropout] = None,
    labeler=None,
) -> tuple[list[TrackerState], BatchStep]:
    """Advance every sequence in the batch by one frame.

    ``labeler(b, kept_dets)`` may supply ground-truth ids for the NMS survivors
    of sequence ``b``; they set track identities and drive identity-guided matching.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    inputs = prepare_frame(states, detections, frames, dt, cfg, model.cfg.num_classes)
    track_in = stack_features(states)
    out = run_model(model, inputs, track_in, dropout)
    if out is not None and inputs.num_dets:
        affinity = 1.0 / (1.0 + np.exp(-out.affinity_logits.value))
        velocities = out.velocity.value
    else:
        affinity = np.zeros(0)
        velocities = np.zeros((0, 2))
    det_src, trk_src = feature_sources(out, track_in, cfg)

    new_states, matches, plans, identities, actives = [], [], [], [], []
    for b, state in enumerate(states):
        kept = inputs.dets[b]
        labels = labeler(b, kept) if labeler is not None else None
        d0, d1 = int(inputs.det_offsets[b]), int(inputs.det_offsets[b + 1])
        match = decide(inputs, b, state, affinity, cfg, labels)
        if cfg.no_velocity_head:
            vel = np.array([k.velocity for k in kept], dtype=float).reshape(-1, 2)
        else:
            vel = velocities[d0:d1]
        identities.append([t.identity for t in state.tracks])
        new_state, plan, active = update_tracks(state, match, kept, vel, frames[b], cfg, labels)
        new_state.features = carry_features(plan, det_src, d0, trk_src, int(inputs.track_offsets[b]))
        if new_state.features is not None:
            rows = new_state.features.value
            for i, t in enumerate(new_state.tracks):
                t.feature = rows[i]
        new_states.append(new_state)
        matches.append(match)
        plans.append(plan)
        actives.append(active)
    return new_states, BatchStep(inputs, out, matches, plans, identities, actives)


def to_outputs(tracks: Sequence[Track], frame: int, timestamp: float, dt: float = 0.0) -> list[TrackOutput]:
    """Output records; a coasting track is reported at its constant-velocity prediction for ``frame``."""
    return [
        TrackOutput(
            frame=frame,
            timestamp=timestamp,
            id=t.id,
            class_id=t.class_id,
            center=predict_box(t.box, t.velocity_est, dt * (frame - t.last_update_frame)).center,
            size=t.box.size,
            yaw=t.box.yaw,
            velocity=t.velocity_est,
            score=t.score,
        )
        for t in tracks
    ]


def _emitted(state: TrackerState, active: list[Track], cfg: TrackerConfig) -> list[Track]:
    if not cfg.emit_inactive:
        return active
    active_ids = {t.id for t in active}
    return active + [t for t in state.tracks if t.id not in active_ids]


def step(
    model: GraphTransformer,
    state: TrackerState,
    detections: Sequence[Box3D],
    frame: int,
    dt: float,
    cfg: TrackerConfig,
    timestamp: Optional[float] = None,
) -> tuple[list[TrackOutput], TrackerState]:
    """One online step for a single sequence."""
    states, result = step_batch(model, [state], [detections], [frame], dt, cfg)
    ts = timestamp if timestamp is not None else frame * dt
    return to_outputs(_emitted(states[0], result.active[0], cfg), frame, ts, dt), states[0]


def run_sequence(frames: Sequence[Sequence[Box3D]], cfg: TrackerConfig, model: GraphTransformer, dt: float = 0.5) -> list[list[TrackOutput]]:
    """Track one sequence from an empty state; ``frames[i]`` holds frame ``i``'s detections."""
    return run_sequences([frames], cfg, model, dt)[0]


def run_sequences(
    sequences: Sequence[Sequence[Sequence[Box3D]]],
    cfg: TrackerConfig,
    model: GraphTransformer,
    dt: float = 0.5,
) -> list[list[list[TrackOutput]]]:
    """Track several independent sequences in lock-step, batching the network calls."""
    cfg.validate()
    states = [TrackerState() for _ in sequences]
    outputs: list[list[list[TrackOutput]]] = [[] for _ in sequences]
    n_frames = max((len(s) for s in sequences), default=0)
    for f in range(n_frames):
        idx = [b for b, s in enumerate(sequences) if f < len(s)]
        sub_states = [states[b] for b in idx]
        dets = [sequences[b][f] for b in idx]
        frames = [f for _ in idx]
        new_states, result = step_batch(model, sub_states, dets, frames, dt, cfg)
        for k, b in enumerate(idx):
            states[b] = new_states[k]
            ts = dets[k][0].timestamp if dets[k] else f * dt
            outputs[b].append(to_outputs(_emitted(new_states[k], result.active[k], cfg), f, ts, dt))
    return outputs
