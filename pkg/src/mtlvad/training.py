"""Semi-supervised training of the two students on normal frames only."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import ContractError, RunConfig, SplitHandle, chunks, derive_seed, seeded_rng
from .nets import ContextAttnSpec, Student, UNetSpec, init_params, load_checkpoint, save_checkpoint
from .teachers import TeacherSet, VideoArrays, load_video_arrays

log = logging.getLogger(__name__)

BRANCH_KINDS = ("appearance_motion", "motion")


class TrainingDivergedError(FloatingPointError):
    pass


class SemiSupervisedViolation(ValueError):
    """Anomalous (label 1) frames, or a non-train split, reached the trainer."""


def patch_loss(pred, target, grid: int) -> torch.Tensor:
    """Maximum over a grid x grid partition of the per-patch mean squared error.

    Accepts ``(N, K, H, W)`` tensors (the result is averaged over the batch) or
    single ``H x W x K`` arrays.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.dim() == 3:  # H x W x K
        pred = pred.permute(2, 0, 1)[None]
        target = target.permute(2, 0, 1)[None]
    n, k, h, w = pred.shape
    if h % grid or w % grid:
        raise ContractError(f"{h}x{w} is not divisible into a {grid}x{grid} patch grid")
    sq = (pred - target) ** 2
    per_patch = sq.reshape(n, k, grid, h // grid, grid, w // grid).mean(dim=(1, 3, 5))
    return per_patch.reshape(n, -1).max(dim=1).values.mean()


def soft_cross_entropy(pred, target) -> torch.Tensor:
    return -(target * torch.log(pred.clamp_min(1e-7))).sum(dim=1).mean()


def lr_at(epoch: int, cfg: RunConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return cfg.lr_init * 0.5 ** (epoch // cfg.lr_halving_period)


@dataclass(frozen=True)
class BranchTask:
    """Which student to train and which teacher fields feed it.

    ``appearance_motion`` sees (I_{t-1}, I_t) and regresses the segmentation of
    I_{t+1}; with ``predict_future=False`` it sees I_t alone and regresses the
    segmentation of I_t (the plain segmentation proxy task used in ablations).
    ``motion`` sees I_t and regresses the masked flow magnitude.
    """

    kind: str
    spec: UNetSpec
    attn_spec: ContextAttnSpec | None = None
    predict_future: bool = True

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise ContractError(f"branch kind must be one of {BRANCH_KINDS}")

    @property
    def name(self) -> str:
        if self.kind == "appearance_motion":
            return "appearance_motion" if self.predict_future else "segmentation"
        return "motion"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "predict_future": self.predict_future}


def make_task(kind: str, cfg: RunConfig, predict_future: bool = True,
              attention_position: str | None = None, scse_enabled: bool | None = None) -> BranchTask:
    """Branch defaults: appearance-motion is a softmax UNet on stacked frames, motion a linear UNet."""
    c = cfg.channels
    if kind == "appearance_motion":
        spec = UNetSpec(in_channels=2 * c if predict_future else c, out_channels=cfg.num_classes + 1,
                        depth=cfg.unet_depth, base_width=cfg.base_width, out_activation="per_pixel_softmax")
        return BranchTask(kind, spec, predict_future=predict_future)
    pos = cfg.attention_position if attention_position is None else attention_position
    scse = cfg.scse_enabled if scse_enabled is None else scse_enabled
    spec = UNetSpec(in_channels=c, out_channels=1, depth=cfg.unet_depth, base_width=cfg.base_width,
                    scse_enabled=scse, attention_position=pos, out_activation="linear")
    attn = ContextAttnSpec(3, tuple(cfg.attention_hidden)) if pos != "none" else None
    return BranchTask(kind, spec, attn)


@dataclass
class TaskTensors:
    inputs: torch.Tensor  # N, Cin, H, W
    targets: torch.Tensor  # N, K, H, W
    context: torch.Tensor | None  # N, 3, H, W


def _nchw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, -1, 1), dtype=np.float32))


def task_tensors(task: BranchTask, arrays: list[VideoArrays]) -> TaskTensors:
    xs, ys, cs = [], [], []
    for va in arrays:
        t = len(va.indices)
        prev, curr = va.frames[0:t], va.frames[1:t + 1]
        if task.kind == "appearance_motion":
            if task.predict_future:
                xs.append(np.concatenate([prev, curr], axis=-1))
                ys.append(va.seg_next)
            else:
                xs.append(curr)
                ys.append(va.seg)
        else:
            xs.append(curr)
            ys.append(va.flow_mag)
            cs.append(va.context)
    ctx = _nchw(np.concatenate(cs)) if cs and task.spec.attention_position != "none" else None
    return TaskTensors(_nchw(np.concatenate(xs)), _nchw(np.concatenate(ys)), ctx)


def branch_loss(task: BranchTask, cfg: RunConfig, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if cfg.loss == "cross_entropy" and task.spec.out_activation == "per_pixel_softmax":
        return soft_cross_entropy(pred, target)
    return patch_loss(pred, target, cfg.patch_grid)


def load_training_arrays(split: SplitHandle, teachers: TeacherSet, cfg: RunConfig) -> list[VideoArrays]:
    if not isinstance(split, SplitHandle) or split.split != "train":
        raise SemiSupervisedViolation("training accepts only the train split handle")
    videos = split.videos()
    if not videos:
        raise ContractError(f"no training videos under {split.dataset.root / 'train'}")
    arrays = []
    for v in videos:
        va = load_video_arrays(v, teachers, cfg)
        full = v.labels()
        if full is not None and full.any():
            raise SemiSupervisedViolation(f"training video {v.video_id} contains anomalous frames")
        arrays.append(va)
    return arrays


@dataclass
class TrainResult:
    task: BranchTask
    out_dir: Path
    losses: list[float] = field(default_factory=list)

    @property
    def best(self) -> Path:
        return self.out_dir / "best"

    @property
    def last(self) -> Path:
        return self.out_dir / "last"


def _adam(cfg: RunConfig):
    return lambda model: torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(0.9, 0.999), eps=1e-8)


def train_branch(task: BranchTask, split: SplitHandle | list[VideoArrays], teachers: TeacherSet, cfg: RunConfig,
                 out_dir: str | Path, resume_from: str | Path | None = None) -> TrainResult:
    """Adam on the branch loss for ``cfg.epochs`` epochs; writes ``best/``, ``last/`` and ``train_log.jsonl``.

    ``split`` may be pre-loaded arrays (from :func:`load_training_arrays`) so
    that several sweeps can share one load.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = split if isinstance(split, list) else load_training_arrays(split, teachers, cfg)
    data = task_tensors(task, arrays)
    n = data.inputs.shape[0]

    meta_base = {"task": task.to_dict(), "config": cfg.to_dict(), "config_hash": cfg.hash(),
                 "teacher_set": teachers.to_dict()}
    if resume_from is not None:
        model, manifest, opt = load_checkpoint(resume_from, _adam(cfg))
        meta = manifest["meta"]
        if meta.get("config_hash") != cfg.hash():
            raise ContractError("resume checkpoint was written under a different RunConfig")
        if model.spec != task.spec:
            raise ContractError("resume checkpoint does not match the branch task")
        start = meta["epoch"] + 1
        losses = list(meta["losses"])
        best = meta["best_loss"]
    else:
        model = init_params(Student(task.spec, task.attn_spec), seeded_rng(derive_seed(cfg.seed, "init", task.name)))
        opt = _adam(cfg)(model)
        start, losses, best = 0, [], math.inf

    log_path = out_dir / "train_log.jsonl"
    if resume_from is None:
        log_path.unlink(missing_ok=True)
    model.train()
    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        t0 = time.perf_counter()
        order = seeded_rng(derive_seed(cfg.seed, "shuffle", task.name, epoch)).permutation(n)
        total, count = 0.0, 0
        for b, idx in enumerate(chunks(order, cfg.batch_size)):
            idx = torch.from_numpy(np.asarray(idx))
            ctx = data.context[idx] if data.context is not None else None
            pred = model(data.inputs[idx], ctx)
            loss = branch_loss(task, cfg, pred, data.targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss in {task.name}: epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        mean = total / count
        losses.append(mean)
        with open(log_path, "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "mean_loss": mean, "lr": lr,
                                 "wall_time": time.perf_counter() - t0}) + "\n")
        log.info("%s epoch %d loss %.6f lr %.2e", task.name, epoch, mean, lr)
        meta = {**meta_base, "epoch": epoch, "losses": losses, "best_loss": min(best, mean)}
        if mean < best:
            best = mean
            save_checkpoint(out_dir / "best", model, meta)
        save_checkpoint(out_dir / "last", model, meta, opt)
    return TrainResult(task, out_dir, losses)
