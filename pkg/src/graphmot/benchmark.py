"""Synthetic benchmark: fixed train/eval splits, trained variants and cached results.

A result is stored under a hash of everything that determines it, so
repeated acceptance runs reuse finished trainings instead of redoing them.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional


from .autodiff import assign_arrays, load_checkpoint, save_checkpoint
from .baselines import cv_greedy_track
from .metrics import EvalConfig, evaluate, velocity_errors
from .model import GraphTransformer, ModelConfig
from .simulator import NoiseConfig, SceneConfig, corrupt, generate_scene
from .tracker import TrackerConfig, run_sequences
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

# bump when a code change invalidates cached results
CACHE_VERSION = 2

EVAL_SEED_OFFSET = 50_000
NOISE_SEED_OFFSET = 1_000_000


@dataclass
class BenchmarkPreset:
    train_scenes: int = 200
    eval_scenes: int = 50
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    data_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "train_scenes": self.train_scenes,
            "eval_scenes": self.eval_scenes,
            "scene": asdict(self.scene),
            "noise": asdict(self.noise),
            "data_seed": self.data_seed,
        }


def scene_seed(preset: BenchmarkPreset, split: str, i: int) -> int:
    base = preset.data_seed * 100_000
    return base + (EVAL_SEED_OFFSET if split == "eval" else 0) + i


def make_split(preset: BenchmarkPreset, split: str):
    """[(detection frames, ground-truth frames)] for ``split`` in {"train", "eval"}."""
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    n = preset.train_scenes if split == "train" else preset.eval_scenes
    out = []
    for i in range(n):
        seed = scene_seed(preset, split, i)
        gt = generate_scene(replace(preset.scene, rng_seed=seed))
        dets = corrupt(gt, replace(preset.noise, rng_seed=seed + NOISE_SEED_OFFSET), classes=preset.scene.classes, arena=preset.scene.arena)
        out.append((dets, gt.frames))
    return out


@dataclass
class Variant:
    """Changes relative to the default configuration."""

    name: str
    train: dict = field(default_factory=dict)
    tracker: dict = field(default_factory=dict)
    eval_tracker: dict = field(default_factory=dict)  # applied at inference only
    base: Optional[str] = None  # reuse this variant's trained model


VARIANTS = {
    "default": Variant("default"),
    "clip2": Variant("clip2", train={"clip_len": 2}),
    "zero_edge": Variant("zero_edge", tracker={"zero_edge_features": True}),
    "no_hidden": Variant("no_hidden", tracker={"no_hidden_state": True}),
    "hungarian": Variant("hungarian", eval_tracker={"use_hungarian": True}, base="default"),
}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _train_key(preset, model_cfg, train_cfg, tracker_cfg) -> dict:
    return {
        "version": CACHE_VERSION,
        "preset": preset.to_dict(),
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg),
        "tracker": asdict(tracker_cfg),
    }


def track_split(model, scenes, tracker_cfg, dt: float, batch: int = 8):
    out = []
    for i in range(0, len(scenes), batch):
        out.extend(run_sequences([d for d, _ in scenes[i : i + batch]], tracker_cfg, model, dt))
    return out


def score_tracks(tracks, scenes, class_names, eval_cfg: Optional[EvalConfig] = None) -> dict:
    eval_cfg = eval_cfg or EvalConfig(class_names=class_names)
    gts = [g for _, g in scenes]
    report = evaluate(tracks, gts, eval_cfg)
    report["velocity_error"] = velocity_errors(tracks, gts, eval_cfg.match_distance)
    return report


def baseline_report(preset: BenchmarkPreset, cache_dir: Path, tracker_cfg: Optional[TrackerConfig] = None) -> dict:
    tracker_cfg = tracker_cfg or TrackerConfig()
    key = _hash({"version": CACHE_VERSION, "preset": preset.to_dict(), "tracker": asdict(tracker_cfg), "kind": "baseline"})
    path = Path(cache_dir) / f"baseline-{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    scenes = make_split(preset, "eval")
    tracks = [cv_greedy_track(d, tracker_cfg, preset.scene.frame_period) for d, _ in scenes]
    report = score_tracks(tracks, scenes, preset.scene.class_names)
    report["detector_velocity_error"] = velocity_errors([[list(f) for f in d] for d, _ in scenes], [g for _, g in scenes], 2.0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True))
    return report


def _variant_configs(name, seed, model_cfg, train_cfg, tracker_cfg):
    variant = VARIANTS[name]
    train_cfg = replace(train_cfg or TrainConfig(), seed=seed, **variant.train)
    tracker_cfg = tracker_cfg or TrackerConfig()
    base_tracker = replace(tracker_cfg, **variant.tracker)
    if variant.base is not None:
        base_variant = VARIANTS[variant.base]
        train_cfg = replace(train_cfg, **base_variant.train)
        base_tracker = replace(tracker_cfg, **base_variant.tracker)
    return model_cfg or ModelConfig(), train_cfg, base_tracker, replace(base_tracker, **variant.eval_tracker)


def variant_model(
    name: str,
    seed: int,
    preset: Optional[BenchmarkPreset] = None,
    cache_dir: Path = Path("benchmark_cache"),
    model_cfg: Optional[ModelConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    tracker_cfg: Optional[TrackerConfig] = None,
):
    """Trained model of one variant, loaded from the cache or trained and stored there.

    Returns (model, inference tracker config, training seconds or None when cached).
    """
    preset = preset or BenchmarkPreset()
    model_cfg, train_cfg, base_tracker, eval_tracker = _variant_configs(name, seed, model_cfg, train_cfg, tracker_cfg)
    tkey = _hash(_train_key(preset, model_cfg, train_cfg, base_tracker))
    ckpt_path = Path(cache_dir) / f"model-{tkey}.ckpt"
    model = GraphTransformer(model_cfg, seed=seed)
    if ckpt_path.exists():
        _, arrays = load_checkpoint(ckpt_path)
        assign_arrays(model.parameters(), arrays)
        return model, eval_tracker, None
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    fit(make_split(preset, "train"), model, train_cfg, base_tracker, preset.scene.frame_period, log_path=Path(cache_dir) / f"train-{tkey}.csv")
    seconds = time.time() - t0
    save_checkpoint(ckpt_path, model.state_arrays(), {"model": model_cfg.to_dict(), "train": asdict(train_cfg)})
    return model, eval_tracker, seconds


def run_variant(
    name: str,
    seed: int,
    preset: Optional[BenchmarkPreset] = None,
    cache_dir: Path = Path("benchmark_cache"),
    model_cfg: Optional[ModelConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    tracker_cfg: Optional[TrackerConfig] = None,
) -> dict:
    """Train (or load from cache) one variant with one seed and evaluate it on the eval split."""
    preset = preset or BenchmarkPreset()
    m_cfg, t_cfg, base_tracker, eval_tracker = _variant_configs(name, seed, model_cfg, train_cfg, tracker_cfg)
    tkey = _hash(_train_key(preset, m_cfg, t_cfg, base_tracker))
    ekey = _hash({"train": tkey, "eval_tracker": asdict(eval_tracker)})
    result_path = Path(cache_dir) / f"result-{name}-s{seed}-{ekey}.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    model, eval_tracker, train_seconds = variant_model(name, seed, preset, cache_dir, model_cfg, train_cfg, tracker_cfg)
    scenes = make_split(preset, "eval")
    tracks = track_split(model, scenes, eval_tracker, preset.scene.frame_period)
    report = score_tracks(tracks, scenes, preset.scene.class_names)
    report["variant"] = name
    report["seed"] = seed
    report["train_seconds"] = train_seconds
    result_path.write_text(json.dumps(report, sort_keys=True))
    return report


def summary(report: dict) -> dict:
    m = report["mean"]
    return {k: m[k] for k in ("AMOTA", "AMOTP", "MOTA", "IDS", "FRAG", "FP", "FN")}


def main(argv=None) -> None:
    import argparse

    ap = argparse.ArgumentParser(description="run benchmark variants and print summaries")
    ap.add_argument("--variants", nargs="+", default=["default"], choices=sorted(VARIANTS))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--cache-dir", type=Path, default=Path("benchmark_cache"))
    ap.add_argument("--train-scenes", type=int, default=200)
    ap.add_argument("--eval-scenes", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    preset = BenchmarkPreset(train_scenes=args.train_scenes, eval_scenes=args.eval_scenes)
    train_cfg = TrainConfig() if args.epochs is None else TrainConfig(epochs=args.epochs)
    base = baseline_report(preset, args.cache_dir)
    print("baseline", json.dumps(summary(base)), flush=True)
    for seed in args.seeds:
        for v in args.variants:
            r = run_variant(v, seed, preset, args.cache_dir, train_cfg=copy.deepcopy(train_cfg))
            print(v, seed, json.dumps(summary(r)), "vel", r["velocity_error"], "train_s", r["train_seconds"], flush=True)


if __name__ == "__main__":
    main()
