"""Pseudo-ground-truth providers and derived motion features.

Teachers supply the targets the students imitate: segmentation score maps,
dense flow and relative depth. Each can come from the synthetic oracle (the
scene script is re-rendered), from precomputed dense-map files under
``pseudo_gt/``, or, for flow only, from the built-in estimator below.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .core import (
    ContractError,
    DenseMap,
    Frame,
    IngestionError,
    MapKind,
    RunConfig,
    VideoDir,
    resize_image,
)

FOREGROUND_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# built-in dense flow


def _shift(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """``out[y, x] = a[y - dy, x - dx]`` with edge replication."""
    p = max(abs(dx), abs(dy))
    if p == 0:
        return a
    ap = np.pad(a, p, mode="edge")
    h, w = a.shape
    return ap[p - dy:p - dy + h, p - dx:p - dx + w]


def _warp(a: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``a`` at ``p - flow(p)`` (bilinear, clamped)."""
    h, w = a.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy - flow[..., 1], xx - flow[..., 0]])
    return ndimage.map_coordinates(a, coords, order=1, mode="nearest")


def _parabola(cm: np.ndarray, c0: np.ndarray, cp: np.ndarray) -> np.ndarray:
    den = cm - 2.0 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(den > 1e-12, 0.5 * (cm - cp) / den, 0.0)
    return np.clip(off, -0.5, 0.5)


def _refine(a: np.ndarray, b: np.ndarray, flow: np.ndarray, window: int, radius: int) -> np.ndarray:
    warped = _warp(a, flow)
    offsets = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    costs = np.empty((len(offsets),) + b.shape)
    for i, (dx, dy) in enumerate(offsets):
        r = b - _shift(warped, dx, dy)
        # the tiny distance penalty makes flat cost surfaces resolve to zero motion
        costs[i] = ndimage.gaussian_filter(r * r, window / 4.0, mode="nearest", truncate=2.0) + 1e-9 * (dx * dx + dy * dy)
    best = np.argmin(costs, axis=0)
    n = 2 * radius + 1
    bdy, bdx = np.divmod(best, n)
    dx = (bdx - radius).astype(np.float64)
    dy = (bdy - radius).astype(np.float64)

    def cost_at(ix, iy):
        ix = np.clip(ix, 0, n - 1)
        iy = np.clip(iy, 0, n - 1)
        return np.take_along_axis(costs, (iy * n + ix)[None], axis=0)[0]

    c0 = cost_at(bdx, bdy)
    # an exact match needs no sub-pixel correction
    inexact = c0 > 1e-12
    inner_x = (bdx > 0) & (bdx < n - 1) & inexact
    inner_y = (bdy > 0) & (bdy < n - 1) & inexact
    sx = np.where(inner_x, _parabola(cost_at(bdx - 1, bdy), c0, cost_at(bdx + 1, bdy)), 0.0)
    sy = np.where(inner_y, _parabola(cost_at(bdx, bdy - 1), c0, cost_at(bdx, bdy + 1)), 0.0)
    return flow + np.stack([dx + sx, dy + sy], axis=-1)


def estimate_dense_flow(prev: Frame, curr: Frame, levels: int = 3, window: int = 7,
                        radius: int = 2, iterations: int = 2) -> DenseMap:
    """Coarse-to-fine window matching with parabolic sub-pixel refinement.

    Returns flow on the pixels of ``curr``: ``curr(p) ~ prev(p - flow(p))``.
    """
    if prev.shape != curr.shape:
        raise ContractError(f"frame shapes differ: {prev.shape} vs {curr.shape}")
    pyr = [(prev.gray(), curr.gray())]
    for _ in range(levels - 1):
        a, b = pyr[-1]
        if min(a.shape) < 2 * window:
            break
        pyr.append(tuple(ndimage.gaussian_filter(x, 1.0, mode="nearest")[::2, ::2] for x in (a, b)))
    flow = np.zeros(pyr[-1][0].shape + (2,))
    for lvl in range(len(pyr) - 1, -1, -1):
        a, b = pyr[lvl]
        if flow.shape[:2] != a.shape:
            zy, zx = a.shape[0] / flow.shape[0], a.shape[1] / flow.shape[1]
            flow = ndimage.zoom(flow, (zy, zx, 1), order=1, mode="nearest", grid_mode=True) * 2.0
            flow = flow[:a.shape[0], :a.shape[1]]
        for _ in range(iterations):
            flow = _refine(a, b, flow, window, radius)
    return DenseMap(flow, MapKind.FLOW)


# ---------------------------------------------------------------------------
# magnitude / direction


def flow_to_mag_ang(flow: DenseMap | np.ndarray) -> tuple[DenseMap, np.ndarray]:
    """Magnitude and angle from the horizontal axis; angle is 0 where magnitude is 0."""
    f = flow.values if isinstance(flow, DenseMap) else np.asarray(flow)
    f = f.astype(np.float64)
    if not np.isfinite(f).all():
        raise ContractError("flow must be finite")
    u, v = f[..., 0], f[..., 1]
    mag = np.hypot(u, v)
    ang = np.where(mag > 0, np.arctan2(v, u), 0.0)
    return DenseMap(mag[..., None], MapKind.FLOW_MAGNITUDE), ang


def direction_features(ang: np.ndarray, mag: DenseMap | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(X, Y) = (|cos ang|, |sin ang|) on moving pixels, zero on stationary ones."""
    m = mag.values[..., 0] if isinstance(mag, DenseMap) else np.asarray(mag)
    if m.ndim == 3:
        m = m[..., 0]
    ang = np.asarray(ang)
    if ang.shape != m.shape:
        raise ContractError(f"angle {ang.shape} and magnitude {m.shape} differ")
    moving = m > 0
    x = np.where(moving, np.abs(np.cos(ang)), 0.0)
    y = np.where(moving, np.abs(np.sin(ang)), 0.0)
    return x, y


def foreground_mask(seg: DenseMap | np.ndarray) -> np.ndarray:
    s = seg.values if isinstance(seg, DenseMap) else np.asarray(seg)
    return s[..., 1:].max(axis=-1) > FOREGROUND_THRESHOLD


def mask_flow(flow_or_mag: DenseMap, seg: DenseMap) -> DenseMap:
    """Zero every pixel whose segmentation has no confident foreground class."""
    if flow_or_mag.shape[:2] != seg.shape[:2]:
        raise ContractError(f"spatial shapes differ: {flow_or_mag.shape[:2]} vs {seg.shape[:2]}")
    fg = foreground_mask(seg)
    return DenseMap(np.where(fg[..., None], flow_or_mag.values, 0.0), flow_or_mag.kind)


# ---------------------------------------------------------------------------
# pseudo-GT bundles

SEG_SOURCES = ("oracle", "precomputed_files")
FLOW_SOURCES = ("oracle", "precomputed_files", "builtin_estimator")
DEPTH_SOURCES = ("oracle", "precomputed_files")


@dataclass(frozen=True)
class TeacherSet:
    seg_source: str = "oracle"
    flow_source: str = "oracle"
    depth_source: str = "oracle"

    def __post_init__(self):
        if self.seg_source not in SEG_SOURCES:
            raise ContractError(f"seg_source must be one of {SEG_SOURCES}")
        if self.flow_source not in FLOW_SOURCES:
            raise ContractError(f"flow_source must be one of {FLOW_SOURCES}")
        if self.depth_source not in DEPTH_SOURCES:
            raise ContractError(f"depth_source must be one of {DEPTH_SOURCES}")

    @property
    def uses_oracle(self) -> bool:
        return "oracle" in (self.seg_source, self.flow_source, self.depth_source)

    def to_dict(self) -> dict:
        return {"seg_source": self.seg_source, "flow_source": self.flow_source, "depth_source": self.depth_source}


@dataclass(frozen=True)
class PseudoGT:
    seg: DenseMap  # current frame
    seg_next: DenseMap | None  # following frame, None at the end of a video
    flow: DenseMap  # unmasked teacher flow
    flow_mag: DenseMap  # masked magnitude, the motion-branch target
    direction: np.ndarray  # H x W x 2, (X, Y)
    depth: DenseMap


def _fit(m: DenseMap, size: int) -> DenseMap:
    h, w = m.shape[:2]
    if (h, w) == (size, size):
        return m
    order = 0 if m.kind == MapKind.SEGMENTATION_SCORES else 1
    v = resize_image(m.values.astype(np.float64), size, order=order)
    if m.kind == MapKind.FLOW:
        v = v * np.array([size / w, size / h])
    if m.kind in (MapKind.DEPTH, MapKind.SEGMENTATION_SCORES, MapKind.ATTENTION):
        v = np.clip(v, 0.0, 1.0)
    return DenseMap(v, m.kind)


class TeacherProvider:
    """Resolves teacher outputs for the frames of one video."""

    def __init__(self, video: VideoDir, teachers: TeacherSet, cfg: RunConfig):
        self.video = video
        self.teachers = teachers
        self.cfg = cfg
        self._frames: dict[int, Frame] = {}
        if teachers.uses_oracle and not video.scene_script_path().is_file():
            raise IngestionError(f"oracle teachers need a synthetic scene script: {video.scene_script_path()}")

    @cached_property
    def indices(self) -> list[int]:
        return self.video.frame_indices()

    @cached_property
    def _oracle(self) -> dict:
        from .synthdata import SceneScript, render_scene

        self.video._log(self.video.scene_script_path())
        script = SceneScript.load(self.video.scene_script_path())
        return {r.frame.index: r for r in render_scene(script, self.cfg)}

    def frame(self, index: int) -> Frame:
        if index not in self._frames:
            self._frames[index] = self.video.read_frame(index, self.cfg.input_size, self.cfg.channels)
        return self._frames[index]

    def seg(self, index: int) -> DenseMap:
        if self.teachers.seg_source == "oracle":
            return self._oracle[index].seg
        return _fit(self.video.read_pseudo_gt("seg", index), self.cfg.input_size)

    def depth(self, index: int) -> DenseMap:
        if self.teachers.depth_source == "oracle":
            return self._oracle[index].depth
        return _fit(self.video.read_pseudo_gt("depth", index), self.cfg.input_size)

    def flow(self, index: int) -> DenseMap:
        src = self.teachers.flow_source
        if src == "oracle":
            return self._oracle[index].flow
        if src == "precomputed_files":
            return _fit(self.video.read_pseudo_gt("flow", index), self.cfg.input_size)
        if index - 1 not in self.indices:
            n = self.cfg.input_size
            return DenseMap(np.zeros((n, n, 2)), MapKind.FLOW)
        return estimate_dense_flow(self.frame(index - 1), self.frame(index), self.cfg.flow_levels,
                                   self.cfg.flow_window, self.cfg.flow_search_radius)

    def bundle(self, index: int) -> PseudoGT:
        seg = self.seg(index)
        nxt = self.seg(index + 1) if index + 1 in self.indices else None
        flow = self.flow(index)
        mag, ang = flow_to_mag_ang(flow)
        x, y = direction_features(ang, mag)
        masked = mask_flow(mag, seg)
        return PseudoGT(seg, nxt, flow, masked, np.stack([x, y], axis=-1).astype(np.float32), self.depth(index))


def load_pseudo_gt(frame: Frame, teachers: TeacherSet, video: VideoDir, cfg: RunConfig) -> PseudoGT:
    """Teacher bundle (seg_t, seg_t+1, masked OFM, direction features, depth) for one frame."""
    return TeacherProvider(video, teachers, cfg).bundle(frame.index)


@dataclass
class VideoArrays:
    """Stacked per-frame inputs and teacher targets for one video.

    Row ``i`` holds frame ``indices[i]``; ``frames`` has one extra leading and
    trailing neighbour so that ``frames[i]``, ``frames[i + 1]``, ``frames[i + 2]``
    are I_{t-1}, I_t, I_{t+1}.
    """

    video_id: str
    indices: np.ndarray  # (T,)
    frames: np.ndarray  # (T + 2, H, W, C)
    seg: np.ndarray  # (T, H, W, K) current
    seg_next: np.ndarray  # (T, H, W, K)
    flow_mag: np.ndarray  # (T, H, W, 1) masked, scaled by cfg.ofm_scale
    context: np.ndarray  # (T, H, W, 3): X, Y, depth
    labels: np.ndarray  # (T,)


def load_video_arrays(video: VideoDir, teachers: TeacherSet, cfg: RunConfig) -> VideoArrays:
    """Collect every frame that has both a predecessor and a successor."""
    prov = TeacherProvider(video, teachers, cfg)
    idx = prov.indices
    if len(idx) < 3:
        raise IngestionError(f"video {video.video_id} needs >= 3 frames")
    usable = idx[1:-1]
    frames = np.stack([prov.frame(i).pixels for i in idx])
    seg, seg_next, mag, ctx = [], [], [], []
    for i in usable:
        b = prov.bundle(i)
        seg.append(b.seg.values)
        seg_next.append(b.seg_next.values)
        mag.append(b.flow_mag.values * cfg.ofm_scale)
        ctx.append(np.concatenate([b.direction, b.depth.values], axis=-1))
    labels = video.labels()
    if labels is None:
        labels = np.zeros(len(idx), dtype=np.int64)
    if len(labels) != len(idx):
        raise IngestionError(f"{video.video_id}: {len(labels)} labels for {len(idx)} frames")
    return VideoArrays(video.video_id, np.asarray(usable), frames, np.stack(seg), np.stack(seg_next),
                       np.stack(mag).astype(np.float32), np.stack(ctx).astype(np.float32),
                       np.asarray(labels[1:-1]))
