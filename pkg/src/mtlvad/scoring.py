"""Anomaly maps, per-frame scores, temporal relaxation, fusion and frame-level AUC."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.stats import rankdata

from .core import ContractError, DenseMap, MapKind, RunConfig, VideoDir, frame_name, write_dense_map
from .nets import Student
from .teachers import TeacherSet, load_video_arrays
from .training import BranchTask, task_tensors

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def anomaly_map(student_out, teacher_out) -> DenseMap:
    """Per-pixel absolute difference summed over channels (H x W x 1)."""
    a = student_out.values if isinstance(student_out, DenseMap) else np.asarray(student_out)
    b = teacher_out.values if isinstance(teacher_out, DenseMap) else np.asarray(teacher_out)
    if a.shape != b.shape:
        raise ContractError(f"student {a.shape} and teacher {b.shape} outputs differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64)).sum(axis=-1, keepdims=True)
    return DenseMap(diff, MapKind.ANOMALY)


def frame_score(amap: DenseMap) -> float:
    if amap.kind != MapKind.ANOMALY:
        raise ContractError("frame_score expects an anomaly map")
    return float(amap.values.astype(np.float64).sum())


@dataclass(frozen=True)
class SmoothingSpec:
    window: int = 9
    order: int = 3

    def __post_init__(self):
        if self.window % 2 == 0 or self.window <= self.order or self.order < 0:
            raise ContractError("smoothing window must be odd and larger than the polynomial order")

    @property
    def half_width(self) -> int:
        return self.window // 2

    @cached_property
    def coefficients(self) -> np.ndarray:
        """Least-squares weights whose dot product with a window gives the fitted centre value."""
        w = self.half_width
        offsets = np.arange(-w, w + 1, dtype=np.float64)
        vander = offsets[:, None] ** np.arange(self.order + 1)[None, :]
        # row 0 of the pseudo-inverse evaluates the fitted polynomial at offset 0
        return np.linalg.pinv(vander)[0]


def smooth_scores(raw, spec: SmoothingSpec) -> np.ndarray:
    """Savitzky-Golay smoothing with mirror padding at both ends."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or len(raw) < spec.window:
        raise ContractError(f"need at least {spec.window} scores, got {raw.shape}")
    w = spec.half_width
    padded = np.pad(raw, w, mode="reflect")
    return np.correlate(padded, spec.coefficients, mode="valid")


def minmax_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def fused_score(s1, s2, thresholds=(0.5, 0.5), normalize: bool = True) -> np.ndarray:
    """Continuous OR-fusion: ``max(s1 / t1, s2 / t2)``; exceeds 1 exactly when a frame is flagged."""
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise ContractError("branch score series differ in length")
    if normalize:
        s1, s2 = minmax_normalize(s1), minmax_normalize(s2)
    return np.maximum(s1 / thresholds[0], s2 / thresholds[1])


def fuse_and_flag(s1, s2, thresholds=(0.5, 0.5), normalize: bool = True) -> np.ndarray:
    """Flag frames where either (normalised) branch score exceeds its threshold."""
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise ContractError("branch score series differ in length")
    if normalize:
        s1, s2 = minmax_normalize(s1), minmax_normalize(s2)
    return ((s1 > thresholds[0]) | (s2 > thresholds[1])).astype(np.int64)


def frame_auc(scores, labels) -> float:
    """ROC area via the Mann-Whitney statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError("scores and labels differ in length")
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("frame AUC needs both normal and anomalous frames")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) while the threshold sweeps from max to min score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n1, n0 = int((labels == 1).sum()), int((labels == 0).sum())
    thresholds = np.unique(scores)[::-1]
    tpr = [0.0] + [float(((scores >= t) & (labels == 1)).sum()) / n1 for t in thresholds]
    fpr = [0.0] + [float(((scores >= t) & (labels == 0)).sum()) / n0 for t in thresholds]
    return np.array(fpr), np.array(tpr)


# ---------------------------------------------------------------------------
# end-to-end scoring


@dataclass
class ScoreSeries:
    video_id: str
    frames: np.ndarray
    labels: np.ndarray
    raw: dict[str, np.ndarray] = field(default_factory=dict)
    relaxed: dict[str, np.ndarray] = field(default_factory=dict)

    def normalized(self, branch: str, cfg: RunConfig) -> np.ndarray:
        r = self.relaxed[branch]
        return minmax_normalize(r) if cfg.score_normalization == "video_minmax" else r

    def records(self) -> list[dict]:
        names = sorted(self.raw, key=lambda b: (b == "motion", b))
        out = []
        for i, f in enumerate(self.frames):
            rec = {"video_id": self.video_id, "frame": int(f), "label": int(self.labels[i])}
            for j, b in enumerate(names, start=1):
                rec[f"raw_b{j}"] = float(self.raw[b][i])
                rec[f"relaxed_b{j}"] = float(self.relaxed[b][i])
                rec[f"branch_b{j}"] = b
            out.append(rec)
        return out


@dataclass
class TrainedBranch:
    task: BranchTask
    model: Student


def _heat_png(values: np.ndarray, scale: float, path: Path) -> None:
    img = np.clip(values[..., 0] / scale, 0, 1) if scale > 0 else np.zeros(values.shape[:2])
    Image.fromarray((img * 255).round().astype(np.uint8), mode="L").save(path)


@torch.no_grad()
def branch_maps(branch: TrainedBranch, tensors, batch: int = 32) -> np.ndarray:
    """Anomaly maps (T, H, W) for one branch over pre-built task tensors."""
    model = branch.model.eval()
    out = []
    for s in range(0, tensors.inputs.shape[0], batch):
        sl = slice(s, s + batch)
        ctx = tensors.context[sl] if tensors.context is not None else None
        pred = model(tensors.inputs[sl], ctx)
        out.append((pred - tensors.targets[sl]).abs().sum(dim=1).double().numpy())
    return np.concatenate(out)


def score_video(branches: dict[str, TrainedBranch], teachers: TeacherSet, video: VideoDir, cfg: RunConfig,
                heatmap_dir: str | Path | None = None, arrays=None) -> ScoreSeries:
    """Raw and relaxed per-frame scores for every branch on one video."""
    va = arrays if arrays is not None else load_video_arrays(video, teachers, cfg)
    spec = SmoothingSpec(cfg.smoothing_window, cfg.smoothing_order)
    series = ScoreSeries(video.video_id if video is not None else va.video_id, va.indices, va.labels)
    for name, br in branches.items():
        maps = branch_maps(br, task_tensors(br.task, [va]))
        raw = maps.reshape(len(maps), -1).sum(axis=1)
        series.raw[name] = raw
        series.relaxed[name] = smooth_scores(raw, spec) if len(raw) >= spec.window else raw.copy()
        if heatmap_dir is not None:
            d = Path(heatmap_dir) / series.video_id / name
            d.mkdir(parents=True, exist_ok=True)
            scale = float(maps.max())
            for idx, m in zip(va.indices, maps):
                dm = DenseMap(m[..., None], MapKind.ANOMALY)
                write_dense_map(dm, d / f"{frame_name(int(idx))}.vadmap")
                _heat_png(dm.values, scale, d / f"{frame_name(int(idx))}.png")
    return series


def dataset_auc(series: list[ScoreSeries], cfg: RunConfig, branch: str | None = None,
                fuse: tuple[str, str] | None = None, warnings: list[str] | None = None) -> float:
    """Frame AUC of one branch (or the OR-fusion of two) over several videos."""

    def scores_of(s: ScoreSeries) -> np.ndarray:
        if fuse is not None:
            a, b = (s.normalized(f, cfg) for f in fuse)
            return np.maximum(a / cfg.branch_thresholds[0], b / cfg.branch_thresholds[1])
        return s.normalized(branch, cfg)

    if cfg.auc_mode == "concat":
        return frame_auc(np.concatenate([scores_of(s) for s in series]), np.concatenate([s.labels for s in series]))
    aucs = []
    for s in series:
        try:
            aucs.append(frame_auc(scores_of(s), s.labels))
        except UndefinedMetricError:
            msg = f"video {s.video_id} has single-class labels; excluded from per-video AUC"
            log.warning(msg)
            if warnings is not None and msg not in warnings:
                warnings.append(msg)
    if not aucs:
        raise UndefinedMetricError("no video has both normal and anomalous frames")
    return float(np.mean(aucs))


def write_score_records(series: list[ScoreSeries], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in series:
            for rec in s.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
