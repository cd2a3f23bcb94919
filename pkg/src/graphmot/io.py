"""JSON-lines readers and writers for detections, ground truth and tracking output.

One object per line.  Detections and ground truth share a format, ground
truth adding ``gt_id``; an optional ``scene`` field (default 0) lets one file
hold several sequences.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .geometry import Box3D
from .tracker import TrackOutput


class FormatError(ValueError):
    pass


REQUIRED_BOX_KEYS = ("frame", "timestamp", "center", "size", "yaw", "velocity", "class", "score")


def box_record(box: Box3D, class_names: Sequence[str], scene: int = 0) -> dict:
    rec = {
        "scene": scene,
        "frame": box.frame,
        "timestamp": box.timestamp,
        "center": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "velocity": list(box.velocity),
        "class": class_names[box.class_id],
        "score": box.score,
    }
    if box.gt_id is not None:
        rec["gt_id"] = box.gt_id
    return rec


def track_record(out: TrackOutput, class_names: Sequence[str], scene: int = 0) -> dict:
    return {
        "scene": scene,
        "frame": out.frame,
        "timestamp": out.timestamp,
        "id": out.id,
        "class": class_names[out.class_id],
        "center": list(out.center),
        "size": list(out.size),
        "yaw": out.yaw,
        "velocity": list(out.velocity),
        "score": out.score,
    }


def _dump(records: Iterable[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _load(path: Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: {exc.msg}") from exc
    return out


def write_boxes(path: Path, scenes: Sequence[Sequence[Sequence[Box3D]]], class_names: Sequence[str]) -> None:
    """``scenes[s][f]`` is the box list of frame ``f`` in scene ``s``."""
    _dump((box_record(b, class_names, s) for s, frames in enumerate(scenes) for f in frames for b in f), path)


def write_tracks(path: Path, scenes: Sequence[Sequence[Sequence[TrackOutput]]], class_names: Sequence[str]) -> None:
    _dump((track_record(t, class_names, s) for s, frames in enumerate(scenes) for f in frames for t in f), path)


def _class_index(name, class_names: Sequence[str], where: str) -> int:
    try:
        return list(class_names).index(name)
    except ValueError:
        raise FormatError(f"{where}: unknown class {name!r}; expected one of {list(class_names)}") from None


def _group(records: list[dict], build, num_frames: Optional[int]) -> list[list[list]]:
    by_scene: dict[int, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        by_scene[int(r.get("scene", 0))][int(r["frame"])].append(build(r))
    if not by_scene:
        return []
    n_scenes = max(by_scene) + 1
    out = []
    for s in range(n_scenes):
        frames = by_scene.get(s, {})
        n = num_frames if num_frames is not None else (max(frames) + 1 if frames else 0)
        out.append([frames.get(f, []) for f in range(n)])
    return out


def read_boxes(path: Path, class_names: Sequence[str], num_frames: Optional[int] = None) -> list[list[list[Box3D]]]:
    records = _load(Path(path))

    def build(r):
        missing = [k for k in REQUIRED_BOX_KEYS if k not in r]
        if missing:
            raise FormatError(f"{path}: record missing keys {missing}")
        return Box3D(
            center=tuple(float(v) for v in r["center"]),
            size=tuple(float(v) for v in r["size"]),
            yaw=float(r["yaw"]),
            velocity=tuple(float(v) for v in r["velocity"]),
            class_id=_class_index(r["class"], class_names, str(path)),
            score=float(r["score"]),
            frame=int(r["frame"]),
            timestamp=float(r["timestamp"]),
            gt_id=int(r["gt_id"]) if r.get("gt_id") is not None else None,
        )

    return _group(records, build, num_frames)


def read_tracks(path: Path, class_names: Sequence[str], num_frames: Optional[int] = None) -> list[list[list[TrackOutput]]]:
    records = _load(Path(path))

    def build(r):
        return TrackOutput(
            frame=int(r["frame"]),
            timestamp=float(r["timestamp"]),
            id=int(r["id"]),
            class_id=_class_index(r["class"], class_names, str(path)),
            center=tuple(float(v) for v in r["center"]),
            size=tuple(float(v) for v in r["size"]),
            yaw=float(r["yaw"]),
            velocity=tuple(float(v) for v in r["velocity"]),
            score=float(r["score"]),
        )

    return _group(records, build, num_frames)
