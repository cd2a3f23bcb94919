"""Command-line entry point: simulate, train, track, eval, ablate.

Failures print one line ``graphmot-error: <kind>: <message>`` to stderr and
exit nonzero (2 for usage and configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .autodiff import AdamW, assign_arrays, load_checkpoint, save_checkpoint
from .baselines import cv_greedy_track
from .benchmark import make_split, track_split
from .config import RunConfig, apply_overrides, echo_config, load_config
from .graph import GraphBuildConfig
from .io import FormatError, read_boxes, read_tracks, write_boxes, write_tracks
from .metrics import curve_svg, curves_csv, evaluate, velocity_errors
from .model import GraphTransformer, ModelConfig
from .simulator import ConfigError
from .tracker import TrackerConfig
from .training import TrainingError, fit

log = logging.getLogger("graphmot")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


# ---------------------------------------------------------------- shared helpers


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _flag_overrides(args) -> dict:
    """Dotted config overrides from the ablation flags that were given."""
    mapping = {
        "clip_len": "train.clip_len",
        "max_age": "tracker.max_age",
        "min_affinity": "tracker.min_affinity",
        "lambda_v": "train.lambda_v",
        "epochs": "train.epochs",
        "dim": "model.d",
        "heads": "model.heads",
        "radius_mult": "graph.radius_multiplier",
    }
    out = {}
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    switches = {
        "hungarian": "tracker.use_hungarian",
        "gt_guided": "tracker.gt_identity_guided",
        "no_hidden_state": "tracker.no_hidden_state",
        "zero_edge_features": "tracker.zero_edge_features",
        "no_velocity_head": "tracker.no_velocity_head",
        "fully_connected": "graph.fully_connected_assoc",
    }
    for attr, key in switches.items():
        if getattr(args, attr, False):
            out[key] = True
    if getattr(args, "active_only", False):
        out["tracker.emit_inactive"] = False
    layers = getattr(args, "layers", None)
    if layers is not None:
        parts = layers.split(",")
        try:
            if len(parts) == 1:
                out["model.dec_layers"] = int(parts[0])
            elif len(parts) == 2:
                out["model.enc_layers"], out["model.dec_layers"] = int(parts[0]), int(parts[1])
            else:
                raise ValueError
        except ValueError:
            raise CliError("usage", f"--layers expects DEC or ENC,DEC, got {layers!r}", 2) from None
    return out


def _tracker_from_dict(d: dict) -> TrackerConfig:
    d = dict(d)
    graph = GraphBuildConfig(**d.pop("graph"))
    return TrackerConfig(graph=graph, **d)


def _read_split(data_dir: Path, split: str, cfg: RunConfig):
    base = Path(data_dir) / split
    det_path, gt_path = base / "detections.jsonl", base / "gt.jsonl"
    for p in (det_path, gt_path):
        if not p.exists():
            raise CliError("missing-input", f"{p} not found (run `graphmot simulate` first)", 2)
    names = cfg.scene.class_names
    dets = read_boxes(det_path, names, cfg.scene.num_frames)
    gts = read_boxes(gt_path, names, cfg.scene.num_frames)
    if len(dets) != len(gts):
        dets = dets + [[[] for _ in range(cfg.scene.num_frames)] for _ in range(len(gts) - len(dets))]
    return list(zip(dets, gts))


def _checkpoint_meta(cfg: RunConfig, epoch: int) -> dict:
    return {
        "model": cfg.model_config().to_dict(),
        "tracker": asdict(cfg.tracker_config()),
        "train": asdict(cfg.train_config()),
        "class_names": cfg.scene.class_names,
        "frame_period": cfg.scene.frame_period,
        "epochs_done": epoch,
    }


def load_model(path: Path):
    path = Path(path)
    if not path.exists():
        raise CliError("missing-input", f"checkpoint {path} not found", 2)
    header, arrays = load_checkpoint(path)
    meta = header["meta"]
    model = GraphTransformer(ModelConfig(**meta["model"]), seed=0)
    assign_arrays(model.parameters(), arrays)
    return model, meta, arrays


def train_model(cfg: RunConfig, train_scenes, out_dir: Path, eval_scenes=None, resume: bool = False) -> GraphTransformer:
    """Fit a model, writing ``model.ckpt``, ``last.ckpt`` (with optimizer state) and ``train_log.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg, tracker_cfg = cfg.model_config(), cfg.train_config(), cfg.tracker_config()
    model = GraphTransformer(model_cfg, seed=cfg.seed)
    opt = AdamW(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    start = 0
    last = out_dir / "last.ckpt"
    if resume:
        if not last.exists():
            raise CliError("missing-input", f"cannot resume: {last} not found", 2)
        model, meta, arrays = load_model(last)
        opt = AdamW(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
        opt.load_state(arrays, meta["optimizer_steps"])
        start = int(meta["epochs_done"])

    evaluate_fn = None
    if eval_scenes is not None and train_cfg.eval_every:

        def evaluate_fn(m):
            tracks = track_split(m, eval_scenes, tracker_cfg, cfg.scene.frame_period)
            return evaluate(tracks, [g for _, g in eval_scenes], cfg.eval_config())["mean"]

    def on_epoch_end(epoch, m, o):
        meta = _checkpoint_meta(cfg, epoch + 1)
        meta["optimizer_steps"] = o.step_count
        save_checkpoint(last, list(m.state_arrays()) + sorted(o.state_arrays().items()), meta)

    result = fit(
        train_scenes,
        model,
        train_cfg,
        tracker_cfg,
        cfg.scene.frame_period,
        evaluate=evaluate_fn,
        log_path=out_dir / "train_log.csv",
        optimizer=opt,
        start_epoch=start,
        on_epoch_end=on_epoch_end,
    )
    save_checkpoint(out_dir / "model.ckpt", model.state_arrays(), _checkpoint_meta(cfg, train_cfg.epochs))
    (out_dir / "epochs.json").write_text(json.dumps(_jsonable(result.epochs), sort_keys=True, indent=1))
    return model


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if hasattr(x, "item"):
        return x.item()
    return x


def track_scenes(model: Optional[GraphTransformer], det_scenes, tracker_cfg: TrackerConfig, frame_period: float):
    if model is None:
        return [cv_greedy_track(d, tracker_cfg, frame_period) for d in det_scenes]
    return track_split(model, [(d, None) for d in det_scenes], tracker_cfg, frame_period)


def write_report(report: dict, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    (out_dir / "curves.csv").write_text(curves_csv(report))
    for metric in ("motar", "motp"):
        (out_dir / f"{metric}.svg").write_text(curve_svg(report, metric))


def evaluate_scenes(track_scenes_, gt_scenes, cfg: RunConfig) -> dict:
    eval_cfg = cfg.eval_config()
    padded = []
    for s, gts in enumerate(gt_scenes):
        frames = list(track_scenes_[s]) if s < len(track_scenes_) else []
        padded.append((frames + [[] for _ in range(len(gts) - len(frames))])[: len(gts)])
    report = evaluate(padded, gt_scenes, eval_cfg)
    report["velocity_error"] = velocity_errors(padded, gt_scenes, eval_cfg.match_distance)
    return report


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> None:
    cfg = _config(args)
    cfg.validate()
    out = Path(args.out or cfg.paths.data_dir)
    preset = cfg.preset()
    for split in ("train", "eval"):
        scenes = make_split(preset, split)
        (out / split).mkdir(parents=True, exist_ok=True)
        write_boxes(out / split / "detections.jsonl", [d for d, _ in scenes], cfg.scene.class_names)
        write_boxes(out / split / "gt.jsonl", [g for _, g in scenes], cfg.scene.class_names)
    echo_config(cfg, out)
    print(f"wrote {preset.train_scenes} train and {preset.eval_scenes} eval scenes to {out}")


def cmd_train(args) -> None:
    cfg = apply_overrides(_config(args), _flag_overrides(args))
    cfg.validate()
    data = Path(args.data or cfg.paths.data_dir)
    out = Path(args.out or cfg.paths.out_dir)
    train = _read_split(data, "train", cfg)
    eval_scenes = _read_split(data, "eval", cfg) if (data / "eval" / "gt.jsonl").exists() else None
    echo_config(cfg, out)
    train_model(cfg, train, out, eval_scenes, resume=args.resume)
    print(f"wrote {out / 'model.ckpt'}")


def cmd_track(args) -> None:
    cfg = _config(args)
    model = None
    if args.baseline:
        tracker_cfg = cfg.tracker_config()
        names, period = cfg.scene.class_names, cfg.scene.frame_period
    else:
        if not args.checkpoint:
            raise CliError("usage", "track needs --checkpoint unless --baseline is given", 2)
        model, meta, _ = load_model(Path(args.checkpoint))
        tracker_cfg = cfg.tracker_config() if args.config else _tracker_from_dict(meta["tracker"])
        names, period = meta["class_names"], meta["frame_period"]
    overrides = {k.split(".", 1)[1]: v for k, v in _flag_overrides(args).items() if k.startswith("tracker.")}
    tracker_cfg = dataclasses.replace(tracker_cfg, **overrides)
    graph_over = {k.split(".", 1)[1]: v for k, v in _flag_overrides(args).items() if k.startswith("graph.")}
    tracker_cfg = dataclasses.replace(tracker_cfg, graph=dataclasses.replace(tracker_cfg.graph, **graph_over))
    tracker_cfg.validate()
    det_path = Path(args.detections)
    if not det_path.exists():
        raise CliError("missing-input", f"{det_path} not found", 2)
    det_scenes = read_boxes(det_path, names)
    tracks = track_scenes(model, det_scenes, tracker_cfg, period)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tracks(out / "tracks.jsonl", tracks, names)
    echo_config(dataclasses.replace(cfg, tracker=dataclasses.replace(tracker_cfg, graph=cfg.graph), graph=tracker_cfg.graph), out)
    print(f"wrote {out / 'tracks.jsonl'}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    names = cfg.scene.class_names
    tracking = Path(args.tracking)
    if tracking.is_dir():
        tracking = tracking / "tracks.jsonl"
    for p in (tracking, Path(args.gt)):
        if not p.exists():
            raise CliError("missing-input", f"{p} not found", 2)
    gts = read_boxes(Path(args.gt), names)
    preds = read_tracks(tracking, names)
    report = evaluate_scenes(preds, gts, cfg)
    out = Path(args.out)
    write_report(report, out)
    echo_config(cfg, out)
    m = report["mean"]
    print(json.dumps({k: m.get(k) for k in ("AMOTA", "AMOTP", "MOTA", "IDS", "FRAG")}, sort_keys=True))


ABLATE_COLUMNS = ["variant", "seed", "AMOTA", "AMOTP", "MOTA", "IDS", "FRAG"]


def cmd_ablate(args) -> None:
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise CliError("missing-input", f"{grid_path} not found", 2)
    grid = yaml.safe_load(grid_path.read_text()) or {}
    unknown = set(grid) - {"config", "data", "out", "seeds", "variants"}
    if unknown:
        raise ConfigError(f"unknown grid key(s) {sorted(unknown)}")
    base_cfg = load_config(Path(grid["config"]) if grid.get("config") else None)
    seeds = grid.get("seeds", [base_cfg.seed])
    variants = grid.get("variants") or {"default": {}}
    out = Path(args.out or grid.get("out", "ablation"))
    out.mkdir(parents=True, exist_ok=True)
    if grid.get("data"):
        train = _read_split(Path(grid["data"]), "train", base_cfg)
        eval_scenes = _read_split(Path(grid["data"]), "eval", base_cfg)
    else:
        train = make_split(base_cfg.preset(), "train")
        eval_scenes = make_split(base_cfg.preset(), "eval")
    rows = []
    for name, spec in variants.items():
        spec = spec or {}
        bad = set(spec) - {"overrides", "track_overrides"}
        if bad:
            raise ConfigError(f"variant {name!r}: unknown key(s) {sorted(bad)}")
        for seed in seeds:
            cfg = apply_overrides(dataclasses.replace(base_cfg, seed=seed), spec.get("overrides") or {})
            cfg.validate()
            run_dir = out / name / f"seed{seed}"
            ckpt = run_dir / "model.ckpt"
            if ckpt.exists():
                model, _, _ = load_model(ckpt)
            else:
                echo_config(cfg, run_dir)
                model = train_model(cfg, train, run_dir)
            track_cfg = apply_overrides(cfg, spec.get("track_overrides") or {})
            tracks = track_scenes(model, [d for d, _ in eval_scenes], track_cfg.tracker_config(), cfg.scene.frame_period)
            report = evaluate_scenes(tracks, [g for _, g in eval_scenes], track_cfg)
            write_report(report, run_dir / "eval")
            m = report["mean"]
            rows.append([name, seed] + [m[k] for k in ABLATE_COLUMNS[2:]])
            print(",".join(str(v) for v in rows[-1]), flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATE_COLUMNS)
        w.writerows(rows)
    print(f"wrote {out / 'ablation.csv'}")


# ---------------------------------------------------------------- parser


def _ablation_flags(p: argparse.ArgumentParser, training: bool) -> None:
    g = p.add_argument_group("ablation flags")
    if training:
        g.add_argument("--clip-len", type=int, help="training clip length T")
        g.add_argument("--lambda-v", type=float, help="velocity loss weight")
        g.add_argument("--epochs", type=int)
        g.add_argument("--layers", help="decoder layers, or ENC,DEC")
        g.add_argument("--dim", type=int, help="feature width d")
        g.add_argument("--heads", type=int, help="attention heads C")
        g.add_argument("--gt-guided", action="store_true", help="match by ground-truth identity while training")
        g.add_argument("--no-hidden-state", action="store_true")
        g.add_argument("--zero-edge-features", action="store_true")
    g.add_argument("--max-age", type=int, help="frames a track may stay unmatched (T_d)")
    g.add_argument("--min-affinity", type=float)
    g.add_argument("--hungarian", action="store_true", help="Hungarian instead of greedy track matching")
    g.add_argument("--fully-connected", action="store_true", help="associate every same-class track/detection pair")
    g.add_argument("--radius-mult", type=float, help="scale the association radii")
    g.add_argument("--no-velocity-head", action="store_true", help="predict tracks with detector velocities")
    g.add_argument("--active-only", action="store_true", help="do not output coasting tracks")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="graphmot", description="graph-transformer 3D multi-object tracking on synthetic scenes")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate train/eval scenes and detections")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the tracker")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    _ablation_flags(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run a trained tracker (or the baseline) over detections")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--baseline", action="store_true", help="constant-velocity greedy tracker, no checkpoint")
    _ablation_flags(p, training=False)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracking output against ground truth")
    p.add_argument("--tracking", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score a grid of variants")
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return 0
    except CliError as exc:
        kind, msg, code = exc.kind, str(exc), exc.code
    except ConfigError as exc:
        kind, msg, code = "config", str(exc), 2
    except FormatError as exc:
        kind, msg, code = "format", str(exc), 2
    except TrainingError as exc:
        kind, msg, code = "training", str(exc), 1
    except (ValueError, OSError) as exc:
        kind, msg, code = type(exc).__name__, str(exc), 1
    print(f"graphmot-error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
