"""Fully online training on short clips with sequence-level backpropagation.

Each clip is tracked autoregressively exactly as at inference time.  From the
second frame on, the affinity and velocity losses of every frame are kept on
one tape; after the last frame their sum is differentiated once, so gradients
flow back through the track features carried between frames.  Matching and
graph construction are hard decisions and receive no gradient.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tape, Tensor
from .geometry import Box3D
from .matching import assign_labels, assign_labels_by_distance, edge_targets
from .model import Dropout, GraphTransformer
from .tracker import (
    CarryPlan,
    FrameInputs,
    TrackerConfig,
    TrackerState,
    carry_features,
    feature_sources,
    run_model,
    step_batch,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    clip_len: int = 6  # T
    batch_size: int = 8
    epochs: int = 12
    lr: float = 1e-3
    weight_decay: float = 0.01
    focal_alpha: float = 0.5
    focal_gamma: float = 1.0
    lambda_v: float = 1.0
    smooth_l1_beta: float = 1.0
    # IoU labels miss a sixth of jittered pedestrians (their boxes are smaller than the jitter)
    label_cost: str = "center"  # or "iou"
    label_min_iou: float = 0.1
    label_max_distance: float = 2.0
    augment: bool = False
    augment_drop_prob: float = 0.1
    augment_jitter: float = 0.1
    eval_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.clip_len < 2:
            raise ValueError(f"clip_len must be >= 2, got {self.clip_len}")
        if self.lambda_v < 0:
            raise ValueError("lambda_v must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.label_cost not in ("iou", "center"):
            raise ValueError(f"label_cost must be 'iou' or 'center', got {self.label_cost!r}")


@dataclass
class FrameLossRecord:
    affinity: float
    velocity: float
    num_pos: int
    num_neg: int
    num_vel: int

    @property
    def total(self) -> float:
        return self.affinity + self.velocity


@dataclass
class Clip:
    scene_id: int
    start: int
    dets: list[list[Box3D]]
    gts: list[list[Box3D]]
    frame_period: float

    @property
    def clip_id(self) -> str:
        return f"scene{self.scene_id}:{self.start}"


# ---------------------------------------------------------------- losses


def focal_terms(logits: Tensor, targets: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Per-edge focal loss -alpha_t (1 - p_t)^gamma log p_t, computed in log space."""
    targets = np.asarray(targets, dtype=float)
    sign = 2.0 * targets - 1.0
    z = ad.mul(logits, sign)
    log_pt = ad.log_sigmoid(z)
    alpha_t = np.where(targets > 0.5, alpha, 1.0 - alpha)
    if gamma == 0.0:
        weighted = log_pt
    else:
        weighted = ad.mul(ad.exp(ad.scale(ad.log_sigmoid(ad.scale(z, -1.0)), gamma)), log_pt)
    return ad.mul(weighted, -alpha_t)


def focal_loss(logits, targets, alpha: float = 0.5, gamma: float = 1.0) -> Tensor:
    logits = ad.as_tensor(logits)
    if logits.shape[0] == 0:
        log.warning("focal loss over an empty edge set")
        return Tensor(np.zeros(()))
    return ad.mean(focal_terms(logits, targets, alpha, gamma))


def velocity_loss(pred, target, mask, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over the velocity components of supervised rows."""
    pred = ad.as_tensor(pred)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return Tensor(np.zeros(()))
    rows = np.flatnonzero(mask)
    err = ad.sub(ad.row_gather(pred, rows), np.asarray(target, dtype=float)[rows])
    return ad.mean(ad.smooth_l1(err, beta))


@dataclass
class FrameTargets:
    """Supervision for one frame of a batch, per-clip normalizers included."""

    edge_target: np.ndarray  # (E,)
    edge_weight: np.ndarray  # (E,) 1 / edges-in-clip
    vel_rows: np.ndarray  # supervised detection rows (batched indices)
    vel_target: np.ndarray  # (len(vel_rows), 2)
    vel_weight: np.ndarray  # (len(vel_rows), 1) 1 / (2 * supervised-in-clip)
    edge_clip: np.ndarray  # clip of each edge
    vel_clip: np.ndarray  # clip of each supervised row


def frame_loss(out, targets: FrameTargets, cfg: TrainConfig, batch_size: int) -> tuple[Tensor, Tensor, list[FrameLossRecord]]:
    """Sum over clips of per-clip mean affinity and velocity losses."""
    zero = Tensor(np.zeros(()))
    l_aff, l_vel = zero, zero
    aff_vals = np.zeros(batch_size)
    vel_vals = np.zeros(batch_size)
    if len(targets.edge_target):
        terms = focal_terms(out.affinity_logits, targets.edge_target, cfg.focal_alpha, cfg.focal_gamma)
        l_aff = ad.sum(ad.mul(terms, targets.edge_weight))
        aff_vals = np.bincount(targets.edge_clip, weights=terms.value * targets.edge_weight, minlength=batch_size)
    if len(targets.vel_rows):
        err = ad.sub(ad.row_gather(out.velocity, targets.vel_rows), targets.vel_target)
        terms = ad.smooth_l1(err, cfg.smooth_l1_beta)
        l_vel = ad.scale(ad.sum(ad.mul(terms, targets.vel_weight)), cfg.lambda_v)
        per_row = (terms.value * targets.vel_weight).sum(axis=1)
        vel_vals = cfg.lambda_v * np.bincount(targets.vel_clip, weights=per_row, minlength=batch_size)
    records = []
    for b in range(batch_size):
        e_mask = targets.edge_clip == b
        records.append(
            FrameLossRecord(
                affinity=float(aff_vals[b]),
                velocity=float(vel_vals[b]),
                num_pos=int(targets.edge_target[e_mask].sum()),
                num_neg=int((1 - targets.edge_target[e_mask]).sum()),
                num_vel=int((targets.vel_clip == b).sum()),
            )
        )
    return l_aff, l_vel, records


def build_targets(
    inputs: FrameInputs,
    labels: list[list[Optional[int]]],
    identities: list[list[Optional[int]]],
    gt_velocity: list[dict[int, tuple[float, float]]],
) -> FrameTargets:
    e_t, e_w, e_c, v_rows, v_t, v_w, v_c = [], [], [], [], [], [], []
    for b in range(inputs.batch_size):
        sl = inputs.edge_slice(b)
        t_idx = inputs.assoc_track[sl] - inputs.track_offsets[b]
        d_idx = inputs.assoc_det[sl] - inputs.det_offsets[b]
        tgt = edge_targets(t_idx, d_idx, labels[b], identities[b])
        e_t.append(tgt)
        e_w.append(np.full(len(tgt), 1.0 / len(tgt)) if len(tgt) else np.zeros(0))
        e_c.append(np.full(len(tgt), b, dtype=np.int64))
        rows = [i for i, g in enumerate(labels[b]) if g is not None]
        v_rows.append(np.array(rows, dtype=np.int64) + inputs.det_offsets[b])
        v_t.append(np.array([gt_velocity[b][labels[b][i]] for i in rows], dtype=float).reshape(-1, 2))
        v_w.append(np.full((len(rows), 1), 1.0 / (2 * len(rows))) if rows else np.zeros((0, 1)))
        v_c.append(np.full(len(rows), b, dtype=np.int64))
    return FrameTargets(
        edge_target=np.concatenate(e_t),
        edge_weight=np.concatenate(e_w),
        vel_rows=np.concatenate(v_rows).astype(np.int64),
        vel_target=np.concatenate(v_t, axis=0),
        vel_weight=np.concatenate(v_w, axis=0),
        edge_clip=np.concatenate(e_c).astype(np.int64),
        vel_clip=np.concatenate(v_c).astype(np.int64),
    )


# ---------------------------------------------------------------- clip forward


@dataclass
class TraceStep:
    inputs: FrameInputs
    plans: list[CarryPlan]
    targets: Optional[FrameTargets]


@dataclass
class ClipBatchResult:
    loss: Tensor
    loss_affinity: float
    loss_velocity: float
    records: list[list[FrameLossRecord]]  # [clip][frame t=2..T]
    trace: list[TraceStep]
    labels: list[list[list[Optional[int]]]]  # [frame][clip][det]
    identities: list[list[list[Optional[int]]]]
    num_edges: int


def label_detections(dets, gts, cfg: TrainConfig):
    if cfg.label_cost == "center":
        return assign_labels_by_distance(dets, gts, cfg.label_max_distance)
    return assign_labels(dets, gts, cfg.label_min_iou)


def _augment(clip: Clip, cfg: TrainConfig, rng: np.random.Generator) -> list[list[Box3D]]:
    from dataclasses import replace

    out = []
    for frame in clip.dets:
        kept = []
        for det in frame:
            if rng.uniform() < cfg.augment_drop_prob:
                continue
            j = rng.standard_normal(3) * cfg.augment_jitter
            kept.append(replace(det, center=tuple(np.array(det.center) + j)))
        out.append(kept)
    return out


def forward_clips(
    model: GraphTransformer,
    clips: Sequence[Clip],
    cfg: TrainConfig,
    tracker_cfg: TrackerConfig,
    dropout_seed: Optional[tuple] = None,
) -> ClipBatchResult:
    """Autoregressive forward over a batch of equal-length clips.

    Must run inside an active :class:`Tape` for the loss to be differentiable.
    """
    lengths = {len(c.dets) for c in clips}
    if len(lengths) != 1:
        raise ValueError("clips in a batch must have equal length")
    n_frames = lengths.pop()
    dt = clips[0].frame_period
    states = [TrackerState() for _ in clips]
    rng = np.random.default_rng(list(dropout_seed) if dropout_seed else 0)
    det_frames = [_augment(c, cfg, rng) if cfg.augment else c.dets for c in clips]
    total = Tensor(np.zeros(()))
    aff_total = vel_total = 0.0
    records: list[list[FrameLossRecord]] = [[] for _ in clips]
    trace: list[TraceStep] = []
    all_labels, all_ids = [], []
    n_edges = 0
    for f in range(n_frames):
        labels_f: list[list[Optional[int]]] = [[] for _ in clips]
        gt_vel: list[dict] = []
        for b, clip in enumerate(clips):
            gt_vel.append({g.gt_id: g.velocity for g in clip.gts[f]})

        def labeler(b, kept, f=f):
            gts = [(g.gt_id, g) for g in clips[b].gts[f]]
            labels_f[b] = label_detections(kept, gts, cfg)
            return labels_f[b]

        dropout = Dropout(model.cfg.dropout, (*dropout_seed, f), True) if dropout_seed is not None else None
        frames = [clip.start + f for clip in clips]
        new_states, step = step_batch(model, states, [d[f] for d in det_frames], frames, dt, tracker_cfg, dropout, labeler)
        targets = None
        if f > 0 and step.output is not None:
            targets = build_targets(step.inputs, labels_f, step.track_identities, gt_vel)
            l_aff, l_vel, recs = frame_loss(step.output, targets, cfg, len(clips))
            total = ad.add(total, ad.add(l_aff, l_vel))
            aff_total += float(l_aff.value)
            vel_total += float(l_vel.value)
            n_edges += len(targets.edge_target)
            for b, r in enumerate(recs):
                records[b].append(r)
        elif f > 0:
            for b in range(len(clips)):
                records[b].append(FrameLossRecord(0.0, 0.0, 0, 0, 0))
        trace.append(TraceStep(step.inputs, step.plans, targets))
        all_labels.append(labels_f)
        all_ids.append(step.track_identities)
        states = new_states
    return ClipBatchResult(total, aff_total, vel_total, records, trace, all_labels, all_ids, n_edges)


def replay_loss(model: GraphTransformer, trace: Sequence[TraceStep], cfg: TrainConfig, tracker_cfg: TrackerConfig) -> Tensor:
    """Recompute the sequence loss with every discrete decision frozen to ``trace``.

    At the parameters that produced the trace this equals the original loss;
    elsewhere it is the smooth function whose gradient backprop computes.
    """
    batch = trace[0].inputs.batch_size
    features: list[Optional[Tensor]] = [None] * batch
    total = Tensor(np.zeros(()))
    for step in trace:
        present = [f for f in features if f is not None]
        track_in = None if not present else (present[0] if len(present) == 1 else ad.concat(present, axis=0))
        out = run_model(model, step.inputs, track_in)
        if step.targets is not None and out is not None:
            l_aff, l_vel, _ = frame_loss(out, step.targets, cfg, batch)
            total = ad.add(total, ad.add(l_aff, l_vel))
        det_src, trk_src = feature_sources(out, track_in, tracker_cfg)
        features = [
            carry_features(plan, det_src, int(step.inputs.det_offsets[b]), trk_src, int(step.inputs.track_offsets[b]))
            for b, plan in enumerate(step.plans)
        ]
    return total


def train_clip(model: GraphTransformer, clip: Clip, cfg: TrainConfig, tracker_cfg: TrackerConfig, dropout_seed=None):
    """Forward and BPTT over a single clip; returns (sequence loss, {name: gradient})."""
    model.zero_grad()
    with Tape() as tape:
        result = forward_clips(model, [clip], cfg, tracker_cfg, dropout_seed)
        if result.num_edges == 0:
            log.warning("clip %s has no association edges; affinity loss is zero", clip.clip_id)
        ad.backward(result.loss, tape)
    grads = {name: p.grad.copy() for name, p in model.params.items()}
    return float(result.loss.value), grads


# ---------------------------------------------------------------- data


def make_clips(scenes: Sequence[tuple[list[list[Box3D]], list[list[Box3D]]]], clip_len: int, frame_period: float) -> list[Clip]:
    """All stride-1 windows of ``clip_len`` frames over (detections, ground truth) scenes."""
    clips = []
    for sid, (dets, gts) in enumerate(scenes):
        for start in range(0, len(dets) - clip_len + 1):
            clips.append(Clip(sid, start, dets[start : start + clip_len], gts[start : start + clip_len], frame_period))
    return clips


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    rows: list[dict] = field(default_factory=list)  # per batch
    epochs: list[dict] = field(default_factory=list)  # per epoch summary (+ eval)


def fit(
    scenes: Sequence[tuple[list[list[Box3D]], list[list[Box3D]]]],
    model: GraphTransformer,
    cfg: TrainConfig,
    tracker_cfg: TrackerConfig,
    frame_period: float = 0.5,
    evaluate: Optional[Callable[[GraphTransformer], dict]] = None,
    log_path: Optional[Path] = None,
    optimizer: Optional[AdamW] = None,
    start_epoch: int = 0,
    on_epoch_end: Optional[Callable[[int, GraphTransformer, AdamW], None]] = None,
) -> FitResult:
    cfg.validate()
    tracker_cfg.validate()
    if not scenes:
        raise ValueError("training needs at least one scene")
    clips = make_clips(scenes, cfg.clip_len, frame_period)
    if not clips:
        raise ValueError(f"no scene has {cfg.clip_len} frames")
    opt = optimizer or AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = FitResult()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a" if start_epoch else "w", newline="")
        writer = csv.writer(fh)
        if not start_epoch:
            writer.writerow(["epoch", "batch", "L_seq", "L_a", "L_v"])
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(clips))
            sums = np.zeros(3)
            n_batches = math.ceil(len(order) / cfg.batch_size)
            for bi in range(n_batches):
                batch = [clips[i] for i in order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]]
                opt.zero_grad()
                try:
                    with Tape() as tape:
                        res = forward_clips(model, batch, cfg, tracker_cfg, dropout_seed=(cfg.seed, epoch, bi))
                        ad.backward(res.loss, tape)
                except ad.NonFiniteError as exc:
                    raise TrainingError(f"non-finite value in epoch {epoch} batch {bi}, clips {[c.clip_id for c in batch]}: {exc}") from exc
                if not all(np.all(np.isfinite(p.grad)) for p in opt.params):
                    raise TrainingError(f"non-finite gradient in epoch {epoch} batch {bi}, clips {[c.clip_id for c in batch]}")
                opt.step()
                row = {"epoch": epoch, "batch": bi, "L_seq": float(res.loss.value), "L_a": res.loss_affinity, "L_v": res.loss_velocity}
                sums += [row["L_seq"], row["L_a"], row["L_v"]]
                result.rows.append(row)
                if writer:
                    writer.writerow([epoch, bi, repr(row["L_seq"]), repr(row["L_a"]), repr(row["L_v"])])
            summary = {"epoch": epoch, "L_seq": float(sums[0] / n_batches), "L_a": float(sums[1] / n_batches), "L_v": float(sums[2] / n_batches)}
            if evaluate is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                summary["eval"] = evaluate(model)
            log.info("epoch %d: %s", epoch, summary)
            result.epochs.append(summary)
            if fh:
                fh.flush()
            if on_epoch_end is not None:
                on_epoch_end(epoch, model, opt)
    finally:
        if fh:
            fh.close()
    return result


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
