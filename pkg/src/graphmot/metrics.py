"""CLEAR-MOT counts and recall-averaged AMOTA / AMOTP.

Predictions and ground truth are matched per class by ground-plane center
distance.  A ground-truth object keeps its previous-frame partner while that
partner stays within the match distance; the rest are paired greedily by
ascending distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class EvalConfig:
    match_distance: float = 2.0
    recall_samples: int = 40
    classes: Optional[list[int]] = None  # None: every class present in the ground truth
    class_names: Optional[list[str]] = None

    def validate(self) -> None:
        if self.match_distance <= 0:
            raise ValueError("match_distance must be > 0")
        if self.recall_samples < 2:
            raise ValueError("recall_samples must be >= 2")


@dataclass
class FrameEvalCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    frag: int = 0
    distance: float = 0.0  # summed over matches

    def __iadd__(self, other: "FrameEvalCounts") -> "FrameEvalCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.ids += other.ids
        self.frag += other.frag
        self.distance += other.distance
        return self


@dataclass
class _GtHistory:
    last_track: Optional[int] = None  # most recent partner ever
    tracked_prev: bool = False  # matched in the previous frame
    ever_tracked: bool = False
    prev_pair: Optional[int] = None  # partner in the previous frame
    frames: int = 0
    matched_frames: int = 0


@dataclass
class SequenceAccumulator:
    """CLEAR-MOT bookkeeping for one sequence and one class."""

    match_distance: float
    counts: FrameEvalCounts = field(default_factory=FrameEvalCounts)
    history: dict[int, _GtHistory] = field(default_factory=dict)
    matched_scores: list[float] = field(default_factory=list)

    def update(self, preds: Sequence, gts: Sequence) -> list[tuple[int, int, float]]:
        """Match one frame; returns (gt index, pred index, distance) triples."""
        pairs, frame = match_frame(preds, gts, self.match_distance, self.history)
        self.counts += frame
        for gi, pi, _ in pairs:
            self.matched_scores.append(float(preds[pi].score))
        return pairs

    def per_gt_coverage(self) -> list[float]:
        return [h.matched_frames / h.frames for h in self.history.values() if h.frames]


def _xy(objs: Sequence) -> np.ndarray:
    return np.array([o.center[:2] for o in objs], dtype=float).reshape(-1, 2)


def greedy_distance_pairs(dist: np.ndarray, match_distance: float, gt_used: list, pred_used: list) -> list[tuple[int, int, float]]:
    """Pair free rows and columns by ascending distance (ties by row, then column); marks them used."""
    pairs = []
    if dist.size == 0:
        return pairs
    gi_all, pi_all = np.nonzero(dist <= match_distance)
    order = np.lexsort((pi_all, gi_all, dist[gi_all, pi_all]))
    for k in order:
        gi, pi = int(gi_all[k]), int(pi_all[k])
        if gt_used[gi] or pred_used[pi]:
            continue
        gt_used[gi] = pred_used[pi] = True
        pairs.append((gi, pi, float(dist[gi, pi])))
    return pairs


def match_frame(preds: Sequence, gts: Sequence, match_distance: float, history: Optional[dict] = None):
    """Match one frame of same-class predictions to ground truth.

    ``history`` maps gt_id to its running state and is updated in place; pass
    an empty dict (or None) for a stand-alone frame.  Returns the matched
    (gt index, pred index, distance) triples and the frame's counts.
    """
    if history is None:
        history = {}
    counts = FrameEvalCounts()
    n_g, n_p = len(gts), len(preds)
    dist = np.sqrt(((_xy(gts)[:, None, :] - _xy(preds)[None, :, :]) ** 2).sum(-1)) if n_g and n_p else np.zeros((n_g, n_p))
    pred_index = {int(p.id): i for i, p in enumerate(preds)}
    gt_used = [False] * n_g
    pred_used = [False] * n_p
    pairs: list[tuple[int, int, float]] = []

    # keep last frame's correspondences that are still valid
    for gi, g in enumerate(gts):
        h = history.get(int(g.gt_id))
        if h is None or h.prev_pair is None:
            continue
        pi = pred_index.get(h.prev_pair)
        if pi is not None and not pred_used[pi] and dist[gi, pi] <= match_distance:
            gt_used[gi] = pred_used[pi] = True
            pairs.append((gi, pi, float(dist[gi, pi])))

    pairs.extend(greedy_distance_pairs(dist, match_distance, gt_used, pred_used))

    matched_gt = {gi: pi for gi, pi, _ in pairs}
    for gi, g in enumerate(gts):
        h = history.setdefault(int(g.gt_id), _GtHistory())
        h.frames += 1
        pi = matched_gt.get(gi)
        if pi is None:
            counts.fn += 1
            h.tracked_prev = False
            h.prev_pair = None
            continue
        tid = int(preds[pi].id)
        counts.tp += 1
        h.matched_frames += 1
        if h.last_track is not None and h.last_track != tid:
            counts.ids += 1
        if h.ever_tracked and not h.tracked_prev:
            counts.frag += 1
        h.last_track = tid
        h.tracked_prev = True
        h.ever_tracked = True
        h.prev_pair = tid
    # objects absent from this frame lose their running correspondence
    present = {int(g.gt_id) for g in gts}
    for gid, h in history.items():
        if gid not in present:
            h.tracked_prev = False
            h.prev_pair = None
    counts.fp = n_p - len(pairs)
    counts.distance = float(sum(d for _, _, d in pairs))
    return pairs, counts


def mota(counts: FrameEvalCounts, gt_total: int) -> float:
    if gt_total <= 0:
        return float("nan")
    return 1.0 - (counts.fp + counts.fn + counts.ids) / gt_total


def motar(counts: FrameEvalCounts, recall: float, num_positives: int) -> float:
    """Recall-normalized MOTA clipped to [0, 1]."""
    if num_positives <= 0 or recall <= 0:
        return float("nan")
    p = num_positives
    value = 1.0 - (counts.ids + counts.fp + counts.fn - (1.0 - recall) * p) / (recall * p)
    return float(min(1.0, max(0.0, value)))


@dataclass
class ClassRun:
    threshold: float
    counts: FrameEvalCounts
    coverage: list[float]
    matched_scores: list[float]


def _by_class(frames: Sequence[Sequence], class_id: int) -> list[list]:
    return [[o for o in f if o.class_id == class_id] for f in frames]


def evaluate_class(
    pred_scenes: Sequence[Sequence[Sequence]],
    gt_scenes: Sequence[Sequence[Sequence]],
    class_id: int,
    threshold: float,
    match_distance: float,
) -> ClassRun:
    """Accumulate counts over scenes keeping only predictions scored >= ``threshold``."""
    total = FrameEvalCounts()
    coverage: list[float] = []
    scores: list[float] = []
    for preds, gts in zip(pred_scenes, gt_scenes):
        acc = SequenceAccumulator(match_distance)
        for pf, gf in zip(_by_class(preds, class_id), _by_class(gts, class_id)):
            acc.update([p for p in pf if p.score >= threshold], gf)
        total += acc.counts
        coverage.extend(acc.per_gt_coverage())
        scores.extend(acc.matched_scores)
    return ClassRun(threshold, total, coverage, scores)


def recall_targets(n: int) -> np.ndarray:
    return np.arange(1, n) / (n - 1)


def _threshold_for_recall(tp_scores_desc: np.ndarray, num_positives: int, r: float) -> Optional[float]:
    # smallest k with (k + 1) / P >= r
    k = int(math.ceil(r * num_positives - 1e-9)) - 1
    k = max(k, 0)
    if k >= len(tp_scores_desc):
        return None
    return float(tp_scores_desc[k])


@dataclass
class ClassCurve:
    recall: list[float]
    motar: list[float]
    motp: list[float]
    threshold: list[Optional[float]]


def amota_class(pred_scenes, gt_scenes, class_id: int, cfg: EvalConfig, _cache: Optional[dict] = None):
    """(AMOTA, AMOTP, curve, cache of runs by threshold) for one class, or None if the class has no ground truth."""
    cache = _cache if _cache is not None else {}

    def run(thr: float) -> ClassRun:
        if thr not in cache:
            cache[thr] = evaluate_class(pred_scenes, gt_scenes, class_id, thr, cfg.match_distance)
        return cache[thr]

    base = run(-math.inf)
    p = base.counts.tp + base.counts.fn
    if p == 0:
        return None
    tp_scores = np.sort(np.array(base.matched_scores))[::-1]
    curve = ClassCurve([], [], [], [])
    for r in recall_targets(cfg.recall_samples):
        thr = _threshold_for_recall(tp_scores, p, r)
        curve.recall.append(float(r))
        curve.threshold.append(thr)
        if thr is None:
            curve.motar.append(0.0)
            curve.motp.append(cfg.match_distance)
            continue
        c = run(thr).counts
        curve.motar.append(motar(c, float(r), p))
        curve.motp.append(c.distance / c.tp if c.tp else cfg.match_distance)
    return float(np.mean(curve.motar)), float(np.mean(curve.motp)), curve, cache


def secondary_from_runs(runs: dict, num_positives: int) -> dict:
    """Best-MOTA threshold among evaluated runs and its CLEAR-MOT summary."""
    best = None
    for thr in sorted(runs, reverse=True):
        r = runs[thr]
        m = mota(r.counts, num_positives)
        if best is None or m > best[0]:
            best = (m, r)
    m, r = best
    c = r.counts
    return {
        "threshold": r.threshold if math.isfinite(r.threshold) else None,
        "MOTA": m,
        "MOTP": c.distance / c.tp if c.tp else None,
        "IDS": c.ids,
        "FRAG": c.frag,
        "MT": int(sum(v >= 0.8 for v in r.coverage)),
        "ML": int(sum(v <= 0.2 for v in r.coverage)),
        "TP": c.tp,
        "FP": c.fp,
        "FN": c.fn,
        "gt_total": num_positives,
    }


def classes_in(gt_scenes) -> list[int]:
    return sorted({int(o.class_id) for scene in gt_scenes for f in scene for o in f})


def evaluate(pred_scenes, gt_scenes, cfg: Optional[EvalConfig] = None) -> dict:
    """Full report: per-class AMOTA/AMOTP and best-MOTA secondary metrics, plus class means and count sums."""
    cfg = cfg or EvalConfig()
    cfg.validate()
    if len(pred_scenes) != len(gt_scenes):
        raise ValueError("prediction and ground-truth scene counts differ")
    classes = cfg.classes if cfg.classes is not None else classes_in(gt_scenes)
    per_class: dict[str, dict] = {}
    curves: dict[str, ClassCurve] = {}
    for c in classes:
        res = amota_class(pred_scenes, gt_scenes, c, cfg)
        if res is None:
            continue
        am, ap, curve, runs = res
        name = cfg.class_names[c] if cfg.class_names and c < len(cfg.class_names) else str(c)
        p = runs[-math.inf].counts.tp + runs[-math.inf].counts.fn
        entry = {"AMOTA": am, "AMOTP": ap}
        entry.update(secondary_from_runs(runs, p))
        per_class[name] = entry
        curves[name] = curve
    mean: dict = {}
    if per_class:
        for key in ("AMOTA", "AMOTP", "MOTA"):
            mean[key] = float(np.mean([v[key] for v in per_class.values()]))
        motps = [v["MOTP"] for v in per_class.values() if v["MOTP"] is not None]
        mean["MOTP"] = float(np.mean(motps)) if motps else None
        for key in ("IDS", "FRAG", "MT", "ML", "TP", "FP", "FN", "gt_total"):
            mean[key] = int(sum(v[key] for v in per_class.values()))
    return {
        "per_class": per_class,
        "mean": mean,
        "config": {"match_distance": cfg.match_distance, "recall_samples": cfg.recall_samples},
        "curves": {k: vars(v) for k, v in curves.items()},
    }


def amota_amotp(pred_scenes, gt_scenes, cfg: Optional[EvalConfig] = None) -> dict:
    report = evaluate(pred_scenes, gt_scenes, cfg)
    out = {k: (v["AMOTA"], v["AMOTP"]) for k, v in report["per_class"].items()}
    if report["mean"]:
        out["mean"] = (report["mean"]["AMOTA"], report["mean"]["AMOTP"])
    return out


def secondary_metrics(pred_scenes, gt_scenes, cfg: Optional[EvalConfig] = None) -> dict:
    report = evaluate(pred_scenes, gt_scenes, cfg)
    keys = ("MOTA", "MOTP", "IDS", "FRAG", "MT", "ML", "TP", "FP", "FN")
    out = {k: {m: v[m] for m in keys} for k, v in report["per_class"].items()}
    if report["mean"]:
        out["mean"] = {m: report["mean"][m] for m in keys}
    return out


def velocity_errors(pred_scenes, gt_scenes, match_distance: float = 2.0) -> dict:
    """Mean ground-plane velocity error over same-class predictions matched to ground truth by center distance.

    Each frame is matched independently, so this works for detections as
    well as for track outputs.
    """
    errs = []
    for preds, gts in zip(pred_scenes, gt_scenes):
        for pf, gf in zip(preds, gts):
            for c in {int(g.class_id) for g in gf}:
                ps = [p for p in pf if p.class_id == c]
                gs = [g for g in gf if g.class_id == c]
                if not ps:
                    continue
                dist = np.sqrt(((_xy(gs)[:, None, :] - _xy(ps)[None, :, :]) ** 2).sum(-1))
                for gi, pi, _ in greedy_distance_pairs(dist, match_distance, [False] * len(gs), [False] * len(ps)):
                    dv = np.asarray(ps[pi].velocity[:2], dtype=float) - np.asarray(gs[gi].velocity[:2], dtype=float)
                    errs.append(float(np.hypot(dv[0], dv[1])))
    return {"mean": float(np.mean(errs)) if errs else None, "count": len(errs)}


# ---------------------------------------------------------------- curve output


def curves_csv(report: dict) -> str:
    lines = ["class,recall,motar,motp,threshold"]
    for name, curve in report["curves"].items():
        for r, a, p, t in zip(curve["recall"], curve["motar"], curve["motp"], curve["threshold"]):
            lines.append(f"{name},{r!r},{a!r},{p!r},{'' if t is None else repr(t)}")
    return "\n".join(lines) + "\n"


def curve_svg(report: dict, metric: str = "motar", width: int = 480, height: int = 320) -> str:
    """Minimal SVG line plot of ``metric`` against recall, one polyline per class."""
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    ymax = 1.0
    if metric == "motp":
        ymax = max([max(c["motp"]) for c in report["curves"].values()] + [1e-9])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{pad // 2}" width="{width - 1.5 * pad}" height="{height - 1.5 * pad}" fill="none" stroke="#444"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">recall</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" text-anchor="middle">{metric}</text>',
    ]
    w, h = width - 1.5 * pad, height - 1.5 * pad
    for k, (name, curve) in enumerate(report["curves"].items()):
        pts = " ".join(
            f"{pad + r * w:.2f},{pad // 2 + h - (v / ymax) * h:.2f}" for r, v in zip(curve["recall"], curve[metric])
        )
        color = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad + 6}" y="{pad // 2 + 14 + 14 * k}" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
