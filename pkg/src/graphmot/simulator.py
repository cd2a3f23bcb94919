"""Synthetic multi-object scenes and a detector noise model.

Ground truth comes from constant-velocity (CV) or constant-turn-rate-and-velocity
(CTRV) kinematics inside a rectangular arena; detections are produced by dropping,
jittering and scoring ground-truth boxes and adding Poisson clutter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Box3D


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


@dataclass
class ClassSpec:
    name: str
    size_mean: tuple[float, float, float]  # (w, l, h)
    size_std: tuple[float, float, float]
    max_speed: float
    count_range: tuple[int, int]  # initial object count, inclusive
    ctrv_fraction: float = 0.5
    turn_rate_range: tuple[float, float] = (-0.2, 0.2)


def default_classes() -> list[ClassSpec]:
    return [
        ClassSpec("car", (1.9, 4.6, 1.7), (0.1, 0.3, 0.1), 12.0, (5, 14), 0.5, (-0.25, 0.25)),
        ClassSpec("pedestrian", (0.6, 0.7, 1.75), (0.08, 0.08, 0.1), 2.0, (3, 10), 0.5, (-0.6, 0.6)),
        ClassSpec("truck", (2.5, 8.0, 3.2), (0.2, 1.0, 0.3), 9.0, (2, 6), 0.3, (-0.15, 0.15)),
    ]


@dataclass
class SceneConfig:
    num_frames: int = 20
    frame_period: float = 0.5
    arena: tuple[float, float, float, float] = (-40.0, 40.0, -40.0, 40.0)
    classes: list[ClassSpec] = field(default_factory=default_classes)
    spawn_prob: float = 0.1
    despawn_prob: float = 0.02
    min_speed_fraction: float = 0.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ConfigError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.frame_period <= 0:
            raise ConfigError(f"frame_period must be > 0, got {self.frame_period}")
        x0, x1, y0, y1 = self.arena
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"arena bounds are empty: {self.arena}")
        for name in ("spawn_prob", "despawn_prob", "min_speed_fraction"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if not self.classes:
            raise ConfigError("at least one object class is required")
        for spec in self.classes:
            if spec.max_speed <= 0:
                raise ConfigError(f"class {spec.name!r}: max_speed must be > 0")
            lo, hi = spec.count_range
            if lo < 0 or hi < lo:
                raise ConfigError(f"class {spec.name!r}: bad count_range {spec.count_range}")
            if not 0.0 <= spec.ctrv_fraction <= 1.0:
                raise ConfigError(f"class {spec.name!r}: ctrv_fraction must lie in [0, 1]")
            if min(spec.size_mean) <= 0 or min(spec.size_std) < 0:
                raise ConfigError(f"class {spec.name!r}: sizes must be positive")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


@dataclass
class NoiseConfig:
    pos_sigma: float = 0.3
    size_sigma: float = 0.1
    yaw_sigma: float = 0.05
    vel_sigma: float = 1.0
    miss_prob: float = 0.1
    fp_rate: float = 2.0
    # score = clamp(1 - score_slope * |position jitter| + N(0, score_noise), 0, 1)
    score_slope: float = 0.5
    score_noise: float = 0.05
    fp_score_range: tuple[float, float] = (0.05, 0.5)
    rng_seed: int = 0

    def validate(self) -> None:
        for name in ("pos_sigma", "size_sigma", "yaw_sigma", "vel_sigma", "score_slope", "score_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ConfigError(f"miss_prob must lie in [0, 1], got {self.miss_prob}")
        if self.fp_rate < 0:
            raise ConfigError(f"fp_rate must be >= 0, got {self.fp_rate}")
        lo, hi = self.fp_score_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"fp_score_range must satisfy 0 <= lo <= hi <= 1, got {self.fp_score_range}")


@dataclass
class GroundTruthScene:
    """Per-frame ground-truth boxes; every box carries a ``gt_id``."""

    frames: list[list[Box3D]]
    frame_period: float
    class_names: list[str]

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class _Agent:
    gt_id: int
    class_id: int
    x: float
    y: float
    z: float
    heading: float
    speed: float
    turn_rate: float
    size: tuple[float, float, float]

    def velocity(self) -> tuple[float, float]:
        return (self.speed * math.cos(self.heading), self.speed * math.sin(self.heading))


def ctrv_step(x: float, y: float, heading: float, speed: float, turn_rate: float, dt: float):
    """Exact CTRV integration over ``dt``; falls back to CV for tiny turn rates."""
    if abs(turn_rate) < 1e-9:
        return x + speed * math.cos(heading) * dt, y + speed * math.sin(heading) * dt, heading
    new_heading = heading + turn_rate * dt
    nx = x + speed / turn_rate * (math.sin(new_heading) - math.sin(heading))
    ny = y + speed / turn_rate * (math.cos(heading) - math.cos(new_heading))
    return nx, ny, new_heading


def _spawn(rng: np.random.Generator, cfg: SceneConfig, class_id: int, gt_id: int, existing: list[_Agent]) -> _Agent:
    spec = cfg.classes[class_id]
    x0, x1, y0, y1 = cfg.arena
    size = tuple(max(0.2, float(m + s * rng.standard_normal())) for m, s in zip(spec.size_mean, spec.size_std))
    radius = 0.5 * math.hypot(size[0], size[1])
    # rejection sampling keeps spawn footprints from overlapping
    for _ in range(50):
        x, y = float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))
        if all(math.hypot(x - a.x, y - a.y) > radius + 0.5 * math.hypot(a.size[0], a.size[1]) + 0.5 for a in existing):
            break
    speed = float(rng.uniform(cfg.min_speed_fraction, 1.0) * spec.max_speed)
    if rng.uniform() < spec.ctrv_fraction:
        turn_rate = float(rng.uniform(*spec.turn_rate_range))
    else:
        turn_rate = 0.0
    return _Agent(
        gt_id=gt_id,
        class_id=class_id,
        x=x,
        y=y,
        z=size[2] / 2,
        heading=float(rng.uniform(-math.pi, math.pi)),
        speed=speed,
        turn_rate=turn_rate,
        size=size,
    )


def _reflect(agent: _Agent, arena: tuple[float, float, float, float]) -> None:
    x0, x1, y0, y1 = arena
    cx, cy = math.cos(agent.heading), math.sin(agent.heading)
    reflected = False
    if agent.x < x0 or agent.x > x1:
        agent.x = 2 * x0 - agent.x if agent.x < x0 else 2 * x1 - agent.x
        cx, reflected = -cx, True
    if agent.y < y0 or agent.y > y1:
        agent.y = 2 * y0 - agent.y if agent.y < y0 else 2 * y1 - agent.y
        cy, reflected = -cy, True
    agent.x = min(max(agent.x, x0), x1)
    agent.y = min(max(agent.y, y0), y1)
    if reflected:
        agent.heading = math.atan2(cy, cx)


def generate_scene(cfg: SceneConfig) -> GroundTruthScene:
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    agents: list[_Agent] = []
    next_id = 0
    for class_id, spec in enumerate(cfg.classes):
        lo, hi = spec.count_range
        for _ in range(int(rng.integers(lo, hi + 1))):
            agents.append(_spawn(rng, cfg, class_id, next_id, agents))
            next_id += 1

    frames: list[list[Box3D]] = []
    dt = cfg.frame_period
    for frame in range(cfg.num_frames):
        if frame > 0:
            survivors = []
            for agent in agents:
                if rng.uniform() < cfg.despawn_prob:
                    continue
                agent.x, agent.y, agent.heading = ctrv_step(agent.x, agent.y, agent.heading, agent.speed, agent.turn_rate, dt)
                _reflect(agent, cfg.arena)
                survivors.append(agent)
            agents = survivors
            for class_id, spec in enumerate(cfg.classes):
                if rng.uniform() < cfg.spawn_prob and sum(a.class_id == class_id for a in agents) < spec.count_range[1]:
                    agents.append(_spawn(rng, cfg, class_id, next_id, agents))
                    next_id += 1
        boxes = [
            Box3D(
                center=(a.x, a.y, a.z),
                size=a.size,
                yaw=a.heading,
                velocity=a.velocity(),
                class_id=a.class_id,
                score=1.0,
                frame=frame,
                timestamp=frame * dt,
                gt_id=a.gt_id,
            )
            for a in agents
        ]
        frames.append(boxes)
    return GroundTruthScene(frames=frames, frame_period=dt, class_names=cfg.class_names)


def _random_class_box(rng: np.random.Generator, spec: ClassSpec, class_id: int, arena, frame: int, timestamp: float, score: float) -> Box3D:
    x0, x1, y0, y1 = arena
    size = tuple(max(0.2, float(m + s * rng.standard_normal())) for m, s in zip(spec.size_mean, spec.size_std))
    heading = float(rng.uniform(-math.pi, math.pi))
    speed = float(rng.uniform(0.0, spec.max_speed))
    return Box3D(
        center=(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), size[2] / 2),
        size=size,
        yaw=heading,
        velocity=(speed * math.cos(heading), speed * math.sin(heading)),
        class_id=class_id,
        score=score,
        frame=frame,
        timestamp=timestamp,
    )


def corrupt(
    scene: GroundTruthScene,
    noise: NoiseConfig,
    classes: Optional[list[ClassSpec]] = None,
    arena: Optional[tuple[float, float, float, float]] = None,
    return_sources: bool = False,
):
    """Turn ground truth into per-frame detections.

    ``classes`` and ``arena`` control false-positive sampling; when omitted they
    are taken from the default class table and the extent of the ground truth.
    With ``return_sources`` the per-detection source ``gt_id`` (None for clutter)
    is returned alongside.
    """
    noise.validate()
    rng = np.random.default_rng(noise.rng_seed)
    classes = classes if classes is not None else default_classes()
    if arena is None:
        pts = [b.center for f in scene.frames for b in f] or [(0.0, 0.0, 0.0)]
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        arena = (min(xs) - 1, max(xs) + 1, min(ys) - 1, max(ys) + 1)

    out: list[list[Box3D]] = []
    sources: list[list[Optional[int]]] = []
    for frame, gts in enumerate(scene.frames):
        dets: list[Box3D] = []
        src: list[Optional[int]] = []
        timestamp = frame * scene.frame_period
        for gt in gts:
            # draw everything up front so the stream layout does not depend on miss outcomes
            drop = rng.uniform() < noise.miss_prob
            dpos = rng.standard_normal(3) * noise.pos_sigma
            dsize = rng.standard_normal(3) * noise.size_sigma
            dyaw = rng.standard_normal() * noise.yaw_sigma
            dvel = rng.standard_normal(2) * noise.vel_sigma
            eps = rng.standard_normal() * noise.score_noise
            if drop:
                continue
            score = float(np.clip(1.0 - noise.score_slope * np.linalg.norm(dpos) + eps, 0.0, 1.0))
            dets.append(
                Box3D(
                    center=tuple(np.array(gt.center) + dpos),
                    size=tuple(np.maximum(np.array(gt.size) + dsize, 0.1)),
                    yaw=gt.yaw + dyaw,
                    velocity=tuple(np.array(gt.velocity) + dvel),
                    class_id=gt.class_id,
                    score=score,
                    frame=frame,
                    timestamp=timestamp,
                )
            )
            src.append(gt.gt_id)
        for _ in range(int(rng.poisson(noise.fp_rate))):
            class_id = int(rng.integers(len(classes)))
            score = float(rng.uniform(*noise.fp_score_range))
            dets.append(_random_class_box(rng, classes[class_id], class_id, arena, frame, timestamp, score))
            src.append(None)
        out.append(dets)
        sources.append(src)
    if return_sources:
        return out, sources
    return out
