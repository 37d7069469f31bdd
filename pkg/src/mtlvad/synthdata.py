"""Synthetic surveillance scenes with exact segmentation, flow and depth.

Scenes are parametric textured blobs moving on static backgrounds. Every
sprite sits on a depth lane in [0, 1] (0 far, 1 near); pixel size and pixel
speed both scale with ``perspective_scale(depth_lane)``. Frames are numbered
from 1; the flow emitted for frame ``t`` is the displacement of each visible
sprite pixel from frame ``t-1`` (so ``I_t(p) = I_{t-1}(p - flow(p))``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import (
    DenseMap,
    Frame,
    MapKind,
    RunConfig,
    derive_seed,
    frame_name,
    seeded_rng,
    write_dense_map,
    write_frame,
    write_json,
)

CLASS_NAMES = ("pedestrian_blob", "cart_blob", "distractor")
ANOMALY_KINDS = ("unseen_class", "fast_motion", "sudden_direction_change")
TRAIN_CLASSES = ("pedestrian_blob", "distractor")
UNSEEN_CLASS = "cart_blob"

S_MIN = 0.35
AXIAL_FORESHORTENING = 0.45
MAX_SPEED = 8.0

_BASE_INTENSITY = {"pedestrian_blob": 0.72, "cart_blob": 0.52, "distractor": 0.88}
_TEXTURE_AMP = 0.1
_TEXTURE_PERIODS = (7.0, 9.0)
_STEP_PERIOD = 8.0


def perspective_scale(depth_lane: float) -> float:
    return S_MIN + (1.0 - S_MIN) * depth_lane


@dataclass
class SpriteSpec:
    shape_class: str
    size: float
    velocity: tuple[float, float]  # (vx, vy) px/frame at depth_lane 1
    depth_lane: float
    start: tuple[float, float]  # (x, y) centre at frame entry_frame - 1
    entry_frame: int
    exit_frame: int
    articulation: float | None = None
    texture_phase: tuple[float, float] = (0.0, 0.0)

    def validate(self) -> None:
        if self.shape_class not in CLASS_NAMES:
            raise ValueError(f"unknown shape_class {self.shape_class!r}")
        if not self.size > 0:
            raise ValueError("sprite size must be > 0")
        if math.hypot(*self.velocity) > MAX_SPEED:
            raise ValueError(f"sprite speed exceeds {MAX_SPEED} px/frame")
        if not 0.0 <= self.depth_lane <= 1.0:
            raise ValueError("depth_lane must lie in [0, 1]")
        if self.exit_frame < self.entry_frame:
            raise ValueError("exit_frame precedes entry_frame")


@dataclass
class AnomalyEvent:
    frame_range: tuple[int, int]  # inclusive
    sprite_index: int
    kind: str
    factor: float = 2.0  # speed multiplier for fast_motion
    period: int = 2  # frames between reversals for sudden_direction_change


@dataclass
class SceneScript:
    video_id: str
    duration: int
    sprites: list[SpriteSpec]
    anomaly_events: list[AnomalyEvent] = field(default_factory=list)
    is_test: bool = False
    split_tag: str = "mixed"
    background_seed: int = 0

    def validate(self) -> None:
        if self.duration < 3:
            raise ValueError("scene needs at least 3 frames")
        if self.anomaly_events and not self.is_test:
            raise ValueError("anomaly events are only permitted in test scripts")
        for s in self.sprites:
            s.validate()
        for e in self.anomaly_events:
            a, b = e.frame_range
            if not 1 <= a <= b <= self.duration:
                raise ValueError(f"event range {e.frame_range} outside 1..{self.duration}")
            if not 0 <= e.sprite_index < len(self.sprites):
                raise ValueError(f"event refers to missing sprite {e.sprite_index}")
            if e.kind not in ANOMALY_KINDS:
                raise ValueError(f"unknown anomaly kind {e.kind!r}")
            if e.kind == "unseen_class" and self.sprites[e.sprite_index].shape_class in TRAIN_CLASSES:
                raise ValueError("unseen_class event must reference a class absent from training")

    def labels(self) -> np.ndarray:
        """Per-frame 0/1 labels for frames 1..duration."""
        lab = np.zeros(self.duration, dtype=np.int64)
        for e in self.anomaly_events:
            lab[e.frame_range[0] - 1:e.frame_range[1]] = 1
        return lab

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        d = dict(d)
        d["sprites"] = [SpriteSpec(**{**s, "velocity": tuple(s["velocity"]), "start": tuple(s["start"]),
                                      "texture_phase": tuple(s["texture_phase"])}) for s in d["sprites"]]
        d["anomaly_events"] = [AnomalyEvent(**{**e, "frame_range": tuple(e["frame_range"])})
                               for e in d["anomaly_events"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        write_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: str | Path) -> "SceneScript":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# kinematics


def trajectory(sprite: SpriteSpec, events: list[AnomalyEvent], index: int, duration: int) -> np.ndarray:
    """Centre positions for frames 0..duration, shape (duration + 1, 2).

    Frame ``entry_frame - 1`` sits at ``sprite.start``; positions outside the
    sprite's lifetime are extrapolated but never rendered.
    """
    s = perspective_scale(sprite.depth_lane)
    v = np.array(sprite.velocity, dtype=np.float64) * s
    mine = [e for e in events if e.sprite_index == index]
    pos = np.zeros((duration + 1, 2))
    pos[sprite.entry_frame - 1] = sprite.start
    sign = 1.0
    step = np.zeros((duration + 1, 2))
    for t in range(1, duration + 1):
        factor = 1.0
        for e in mine:
            a, b = e.frame_range
            if e.kind == "fast_motion" and a <= t <= b:
                factor *= e.factor
            if e.kind == "sudden_direction_change" and a <= t <= b:
                sign = -1.0 if ((t - a) // e.period) % 2 == 0 else 1.0
        step[t] = sign * factor * v
    for t in range(sprite.entry_frame, duration + 1):
        pos[t] = pos[t - 1] + step[t]
    for t in range(sprite.entry_frame - 2, -1, -1):
        pos[t] = pos[t + 1] - step[t + 1]
    return pos


def _parts(sprite: SpriteSpec, centre: np.ndarray, t: int):
    """Yield (part_id, centre_xy, kind, radii) for each rigid part at frame t."""
    size = sprite.size * perspective_scale(sprite.depth_lane)
    cx, cy = centre
    if sprite.shape_class == "pedestrian_blob":
        yield 0, (cx, cy - 0.05 * size), "ellipse", (0.22 * size, 0.42 * size)
        amp = (sprite.articulation or 0.0) * perspective_scale(sprite.depth_lane)
        r = max(0.11 * size, 0.8)
        for i, side in enumerate((-1.0, 1.0)):
            osc = amp * math.sin(2 * math.pi * t / _STEP_PERIOD + i * math.pi)
            yield 1 + i, (cx + side * 0.13 * size + osc, cy + 0.42 * size), "ellipse", (r, r)
    elif sprite.shape_class == "cart_blob":
        yield 0, (cx, cy), "rect", (0.6 * size, 0.3 * size)
    else:
        yield 0, (cx, cy), "ellipse", (0.3 * size, 0.3 * size)


@dataclass(frozen=True)
class RenderedFrame:
    frame: Frame
    seg: DenseMap
    flow: DenseMap
    depth: DenseMap
    label: int
    instances: np.ndarray  # H x W int, -1 background, else 8 * sprite + part


def _background(size: int, seed: int) -> np.ndarray:
    rng = seeded_rng(seed)
    a, b = rng.uniform(0, 2 * math.pi, 2)
    level = rng.uniform(0.2, 0.3)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return level + 0.06 * np.sin(2 * math.pi * x / 23 + a) * np.sin(2 * math.pi * y / 31 + b)


def render_scene(script: SceneScript, cfg: RunConfig, rng: np.random.Generator | None = None) -> Iterator[RenderedFrame]:
    """Render frames 1..duration with exact oracle maps.

    The output is a pure function of ``(script, cfg)``; ``rng`` is accepted for
    interface symmetry but all randomness lives in the script itself.
    """
    script.validate()
    size = cfg.input_size
    k = cfg.num_classes + 1
    bg = _background(size, script.background_seed)
    traj = [trajectory(s, script.anomaly_events, i, script.duration) for i, s in enumerate(script.sprites)]
    labels = script.labels()
    order = sorted(range(len(script.sprites)), key=lambda i: (script.sprites[i].depth_lane, i))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    for t in range(1, script.duration + 1):
        img = bg.copy()
        cls = np.zeros((size, size), dtype=np.int64)
        flow = np.zeros((size, size, 2))
        depth = np.zeros((size, size))
        inst = np.full((size, size), -1, dtype=np.int64)
        for i in order:
            sp = script.sprites[i]
            if not sp.entry_frame <= t <= sp.exit_frame:
                continue
            prev_parts = {pid: c for pid, c, _, _ in _parts(sp, traj[i][t - 1], t - 1)}
            ph = sp.texture_phase
            for pid, (px, py), kind, (rx, ry) in _parts(sp, traj[i][t], t):
                x0, x1 = max(int(math.floor(px - rx)), 0), min(int(math.ceil(px + rx)) + 1, size)
                y0, y1 = max(int(math.floor(py - ry)), 0), min(int(math.ceil(py + ry)) + 1, size)
                if x0 >= x1 or y0 >= y1:
                    continue
                u = xs[y0:y1, x0:x1] - px
                v = ys[y0:y1, x0:x1] - py
                if kind == "ellipse":
                    m = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
                else:
                    m = (np.abs(u) <= rx) & (np.abs(v) <= ry)
                if not m.any():
                    continue
                tex = (_BASE_INTENSITY[sp.shape_class]
                       + _TEXTURE_AMP * np.sin(2 * math.pi * u / _TEXTURE_PERIODS[0] + ph[0])
                       + _TEXTURE_AMP * np.sin(2 * math.pi * v / _TEXTURE_PERIODS[1] + ph[1]))
                qx, qy = prev_parts[pid]
                sl = (slice(y0, y1), slice(x0, x1))
                img[sl][m] = tex[m]
                cls[sl][m] = CLASS_NAMES.index(sp.shape_class) + 1
                flow[sl][m] = (px - qx, py - qy)
                depth[sl][m] = sp.depth_lane
                inst[sl][m] = 8 * i + pid
        onehot = np.zeros((size, size, k), dtype=np.float32)
        onehot[ys.astype(int), xs.astype(int), np.minimum(cls, k - 1)] = 1.0
        px_img = np.clip(img, 0.0, 1.0)[..., None]
        if cfg.channels == 3:
            px_img = np.repeat(px_img, 3, axis=2)
        yield RenderedFrame(
            frame=Frame(px_img, t, script.video_id),
            seg=DenseMap(onehot, MapKind.SEGMENTATION_SCORES),
            flow=DenseMap(flow, MapKind.FLOW),
            depth=DenseMap(depth[..., None], MapKind.DEPTH),
            label=int(labels[t - 1]),
            instances=inst,
        )


# ---------------------------------------------------------------------------
# script construction


def _exit_frame(sprite: SpriteSpec, events, index: int, duration: int, size: int) -> int:
    pos = trajectory(sprite, events, index, duration)
    ext = sprite.size * perspective_scale(sprite.depth_lane) * 0.7
    for t in range(sprite.entry_frame, duration + 1):
        x, y = pos[t]
        if x < -ext or x > size + ext or y < -ext or y > size + ext:
            return max(t - 1, sprite.entry_frame)
    return duration


_WALK_SPEED = (0.8, 2.2)


def _depth_for(rng, tag: str) -> float:
    if tag == "direction_diverse":
        return float(rng.uniform(0.55, 0.95))
    return float(rng.uniform(0.15, 1.0))


def _random_walker(rng, cfg: RunConfig, t: int, tag: str, inside: bool, shape_class="pedestrian_blob",
                   depth: float | None = None, axial: bool | None = None, speed: float | None = None) -> SpriteSpec:
    size_px = cfg.input_size
    if depth is None:
        depth = _depth_for(rng, tag)
    if axial is None:
        axial = tag != "depth_diverse" and rng.random() < 0.4
    if speed is None:
        speed = float(rng.uniform(*_WALK_SPEED))
    s = perspective_scale(depth)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    ref_size = size_px * 0.22 if shape_class != "distractor" else size_px * 0.18
    half = ref_size * s * 0.6
    if axial:
        vel = (0.0, direction * speed * AXIAL_FORESHORTENING)
        x = float(rng.uniform(half, size_px - half))
        y = float(rng.uniform(half, size_px - half)) if inside else (-half if direction > 0 else size_px + half)
    else:
        vel = (direction * speed, 0.0)
        y = float(rng.uniform(half, size_px - half))
        x = float(rng.uniform(half, size_px - half)) if inside else (-half if direction > 0 else size_px + half)
    return SpriteSpec(
        shape_class=shape_class,
        size=ref_size,
        velocity=vel,
        depth_lane=depth,
        start=(x, y),
        entry_frame=t,
        exit_frame=t,
        articulation=2.0 if shape_class == "pedestrian_blob" else None,
        texture_phase=tuple(float(p) for p in rng.uniform(0, 2 * math.pi, 2)),
    )


def _distractor(rng, cfg: RunConfig, t: int, tag: str) -> SpriteSpec:
    sp = _random_walker(rng, cfg, t, tag, inside=True, shape_class="distractor")
    sp.velocity = (0.0, 0.0)
    return sp


def _bystander(rng, cfg: RunConfig, tag: str, duration: int) -> SpriteSpec:
    """A pedestrian standing still for the whole clip. It looks like a walker
    in a single frame, so only motion cues tell the two apart."""
    sp = _random_walker(rng, cfg, 1, tag, inside=True)
    sp.velocity = (0.0, 0.0)
    sp.articulation = 0.0
    sp.exit_frame = duration
    return sp


_BYSTANDER_RATE = {"mixed": 0.5, "depth_diverse": 0.6, "direction_diverse": 0.8}

# rigid distractors that cross the scene faster than any walker
_MOVER_RATE = 0.25
_MOVER_SPEED = (2.0, 3.0)


def _mover(rng, cfg: RunConfig, t: int, tag: str) -> SpriteSpec:
    speed = float(rng.uniform(*_MOVER_SPEED))
    return _random_walker(rng, cfg, t, tag, inside=(t == 1), shape_class="distractor", axial=False, speed=speed)


def normal_script(rng: np.random.Generator, cfg: RunConfig, video_id: str, duration: int,
                  tag: str = "mixed", crowd: int = 3, is_test: bool = False) -> SceneScript:
    """Normal-only scene: walkers (parallel or axial), standing bystanders, static distractors
    and fast rigid movers of the distractor class."""
    size = cfg.input_size
    sprites: list[SpriteSpec] = []
    if rng.random() < 0.6:
        sprites.append(_distractor(rng, cfg, 1, tag))
        sprites[-1].exit_frame = duration
    for _ in range(2):
        if rng.random() < _BYSTANDER_RATE.get(tag, 0.5):
            sprites.append(_bystander(rng, cfg, tag, duration))
    alive: list[int] = []
    for t in range(1, duration + 1):
        alive = [i for i in alive if sprites[i].exit_frame >= t]
        while len(alive) < crowd:
            if rng.random() < _MOVER_RATE:
                sp = _mover(rng, cfg, t, tag)
            else:
                sp = _random_walker(rng, cfg, t, tag, inside=(t == 1))
            sprites.append(sp)
            sp.exit_frame = _exit_frame(sp, [], len(sprites) - 1, duration, size)
            alive.append(len(sprites) - 1)
            if t > 1 and rng.random() < 0.5:
                break
    return SceneScript(video_id, duration, sprites, [], is_test=is_test, split_tag=tag,
                       background_seed=int(rng.integers(0, 2**31)))


def add_event(script: SceneScript, rng: np.random.Generator, cfg: RunConfig, kind: str,
              start: int, length: int) -> AnomalyEvent:
    """Insert a dedicated sprite carrying one anomaly event starting at ``start``."""
    size = cfg.input_size
    tag = script.split_tag
    depth = float(rng.uniform(0.6, 1.0)) if tag != "direction_diverse" else float(rng.uniform(0.6, 0.95))
    idx = len(script.sprites)
    end = min(start + length - 1, script.duration)
    if kind == "unseen_class":
        sp = _random_walker(rng, cfg, start, tag, inside=True, shape_class=UNSEEN_CLASS, depth=depth, axial=False)
        script.sprites.append(sp)
        sp.exit_frame = min(end, _exit_frame(sp, [], idx, script.duration, size))
        ev = AnomalyEvent((start, sp.exit_frame), idx, kind)
    elif kind == "fast_motion":
        sp = _random_walker(rng, cfg, start, tag, inside=True, depth=depth, axial=False)
        # centre the fast crossing so it stays in view for the whole event
        travel = 2.0 * sp.velocity[0] * perspective_scale(depth) * (end - start + 1)
        sp.start = ((size - travel) / 2, sp.start[1])
        script.sprites.append(sp)
        ev = AnomalyEvent((start, end), idx, kind, factor=2.0)
        sp.exit_frame = min(end, _exit_frame(sp, [ev], idx, script.duration, size))
        ev.frame_range = (start, max(start, sp.exit_frame))
    elif kind == "sudden_direction_change":
        sp = _random_walker(rng, cfg, start, tag, inside=True, depth=depth)
        sp.start = (float(rng.uniform(0.3, 0.7) * size), float(rng.uniform(0.3, 0.7) * size))
        script.sprites.append(sp)
        ev = AnomalyEvent((start, end), idx, kind, period=2)
        sp.exit_frame = end
    else:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    script.anomaly_events.append(ev)
    return ev


def anomaly_script(rng: np.random.Generator, cfg: RunConfig, video_id: str, duration: int,
                tag: str = "mixed", kinds: tuple[str, ...] = ANOMALY_KINDS, event_length: int = 14) -> SceneScript:
    """Normal background activity plus one event of each requested kind, spaced apart."""
    script = normal_script(rng, cfg, video_id, duration, tag=tag, is_test=True)
    order = list(kinds)
    rng.shuffle(order)
    slot = duration // (len(order) + 1)
    for j, kind in enumerate(order):
        start = (j + 1) * slot - event_length // 2 + int(rng.integers(-3, 4))
        add_event(script, rng, cfg, kind, max(start, 3), event_length)
    script.validate()
    return script


def contrast_script(cfg: RunConfig, video_id: str = "contrast", duration: int = 40, seed: int = 0,
                    depth: float = 0.85) -> SceneScript:
    """Two walkers on the same lane: one reverses direction every 2 frames, one
    moves at twice normal speed with constant velocity. Sprite 0 is the
    reversing walker, sprite 1 the fast one."""
    rng = seeded_rng(seed)
    size = cfg.input_size
    speed = 1.3
    s = perspective_scale(depth)
    ref = size * 0.22
    rev = SpriteSpec("pedestrian_blob", ref, (speed, 0.0), depth, (size * 0.5, size * 0.3), 1, duration,
                     articulation=2.0, texture_phase=(0.3, 1.1))
    fast_travel = 2 * speed * s * duration
    fast = SpriteSpec("pedestrian_blob", ref, (speed, 0.0), depth, ((size - fast_travel) / 2, size * 0.75), 1,
                      duration, articulation=2.0, texture_phase=(2.0, 0.4))
    events = [AnomalyEvent((4, duration), 0, "sudden_direction_change", period=2),
              AnomalyEvent((1, duration), 1, "fast_motion", factor=2.0)]
    return SceneScript(video_id, duration, [rev, fast], events, is_test=True, split_tag="contrast",
                       background_seed=int(rng.integers(0, 2**31)))


# ---------------------------------------------------------------------------
# benchmark on disk

TRAIN_TAGS = ("mixed", "mixed", "mixed", "mixed", "depth_diverse", "depth_diverse",
              "direction_diverse", "direction_diverse")
TEST_TAGS = ("mixed", "mixed", "depth_diverse", "depth_diverse", "direction_diverse", "direction_diverse")


def write_video(script: SceneScript, cfg: RunConfig, video_dir: str | Path, pseudo_gt: bool = True) -> None:
    video_dir = Path(video_dir)
    (video_dir / "frames").mkdir(parents=True, exist_ok=True)
    if pseudo_gt:
        for src in ("seg", "flow", "depth"):
            (video_dir / "pseudo_gt" / src).mkdir(parents=True, exist_ok=True)
    script.save(video_dir / "scene.json")
    for r in render_scene(script, cfg):
        name = frame_name(r.frame.index)
        write_frame(r.frame, video_dir / "frames" / f"{name}.png")
        if pseudo_gt:
            write_dense_map(r.seg, video_dir / "pseudo_gt" / "seg" / f"{name}.vadmap")
            write_dense_map(r.flow, video_dir / "pseudo_gt" / "flow" / f"{name}.vadmap")
            write_dense_map(r.depth, video_dir / "pseudo_gt" / "depth" / f"{name}.vadmap")
    write_json({"video_id": script.video_id, "first_index": 1, "labels": script.labels().tolist()},
               video_dir / "labels.json")


def benchmark_scripts(seed: int, cfg: RunConfig, n_train: int = 8, n_test: int = 6,
                      train_duration: int = 60, test_duration: int = 100) -> tuple[list[SceneScript], list[SceneScript]]:
    train, test = [], []
    for i in range(n_train):
        rng = seeded_rng(derive_seed(seed, "train", i))
        train.append(normal_script(rng, cfg, f"train_{i:02d}", train_duration, tag=TRAIN_TAGS[i % len(TRAIN_TAGS)]))
    for i in range(n_test):
        rng = seeded_rng(derive_seed(seed, "test", i))
        test.append(anomaly_script(rng, cfg, f"test_{i:02d}", test_duration, tag=TEST_TAGS[i % len(TEST_TAGS)]))
    return train, test


def make_benchmark(seed: int, cfg: RunConfig, root: str | Path, **kwargs) -> dict:
    """Write the synthetic benchmark under ``root`` and return its inventory."""
    root = Path(root)
    train, test = benchmark_scripts(seed, cfg, **kwargs)
    inventory = {"seed": seed, "input_size": cfg.input_size, "num_classes": cfg.num_classes,
                 "train": [], "test": [], "anomaly_counts": {k: 0 for k in ANOMALY_KINDS}}
    for split, scripts in (("train", train), ("test", test)):
        for sc in scripts:
            write_video(sc, cfg, root / split / sc.video_id)
            inventory[split].append({"video_id": sc.video_id, "split_tag": sc.split_tag,
                                     "frames": sc.duration, "anomalous_frames": int(sc.labels().sum()),
                                     "events": [e.kind for e in sc.anomaly_events]})
            for e in sc.anomaly_events:
                inventory["anomaly_counts"][e.kind] += 1
    write_json(inventory, root / "benchmark.json")
    return inventory
