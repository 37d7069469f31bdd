"""Manifest-driven experiments: training, evaluation reports, ablation sweeps and the contrast probe."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, ContractError, DatasetRoot, RunConfig, VideoDir, write_json
from .nets import CheckpointError, load_checkpoint
from .scoring import (
    ScoreSeries,
    TrainedBranch,
    UndefinedMetricError,
    branch_maps,
    dataset_auc,
    frame_auc,
    score_video,
    write_score_records,
)
from .teachers import TeacherSet, load_video_arrays
from .training import BRANCH_KINDS, BranchTask, load_training_arrays, make_task, task_tensors, train_branch

log = logging.getLogger(__name__)

ABLATIONS = ("proxy_tasks", "attention_mechanisms", "attention_position")
ABLATION_ROWS = {
    "proxy_tasks": ("Seg", "OFM", "Seg+Pred", "Seg+OFM", "Seg+OFM+Pred"),
    "attention_mechanisms": ("UNet", "UNet+Att", "UNet+Att+SCSE"),
    "attention_position": ("none", "encoder", "decoder", "skip_connection", "final_layer"),
}
DIVERSE_TAGS = ("depth_diverse", "direction_diverse")


@dataclass
class ExperimentManifest:
    config: RunConfig
    dataset_root: Path
    teacher_set: TeacherSet = field(default_factory=TeacherSet)
    branch_selection: tuple[str, ...] = BRANCH_KINDS
    ablation: str | None = None
    sweep: tuple[str, ...] | None = None  # subset of the ablation's rows
    eval_tags: tuple[str, ...] | None = None  # restrict scoring to test videos with these split tags

    def __post_init__(self):
        self.dataset_root = Path(self.dataset_root)
        order = {b: i for i, b in enumerate(BRANCH_KINDS)}
        self.branch_selection = tuple(sorted(set(self.branch_selection), key=lambda b: (order.get(b, len(order)), b)))
        if self.sweep is not None:
            self.sweep = tuple(self.sweep)
        if self.eval_tags is not None:
            self.eval_tags = tuple(self.eval_tags)

    def validate(self, need_dataset: bool = True) -> "ExperimentManifest":
        self.config.validate()
        if not self.branch_selection or any(b not in BRANCH_KINDS for b in self.branch_selection):
            raise ConfigError(f"branch_selection must be a non-empty subset of {BRANCH_KINDS}")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.sweep is not None:
            if self.ablation is None:
                raise ConfigError("sweep given without an ablation")
            bad = [r for r in self.sweep if r not in ABLATION_ROWS[self.ablation]]
            if bad:
                raise ConfigError(f"unknown {self.ablation} rows {bad}")
        if need_dataset and not self.dataset_root.is_dir():
            raise ConfigError(f"dataset_root does not exist: {self.dataset_root}")
        return self

    @property
    def rows(self) -> tuple[str, ...]:
        if self.ablation is None:
            return ()
        return self.sweep if self.sweep is not None else ABLATION_ROWS[self.ablation]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "dataset_root": str(self.dataset_root),
            "teacher_set": self.teacher_set.to_dict(),
            "branch_selection": list(self.branch_selection),
            "ablation": self.ablation,
            "sweep": list(self.sweep) if self.sweep is not None else None,
            "eval_tags": list(self.eval_tags) if self.eval_tags is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentManifest":
        known = {"config", "dataset_root", "teacher_set", "branch_selection", "ablation", "sweep", "eval_tags"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown manifest fields {sorted(extra)}")
        if "dataset_root" not in d:
            raise ConfigError("manifest needs dataset_root")
        root = Path(d["dataset_root"])
        if base is not None and not root.is_absolute():
            root = base / root
        return cls(
            config=RunConfig.from_dict(d.get("config", {})),
            dataset_root=root,
            teacher_set=TeacherSet(**d.get("teacher_set", {})),
            branch_selection=tuple(d.get("branch_selection", BRANCH_KINDS)),
            ablation=d.get("ablation"),
            sweep=d.get("sweep"),
            eval_tags=d.get("eval_tags"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentManifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"manifest {path} is not valid JSON: {e}") from e
        return cls.from_dict(d, base=path.parent.resolve())

    def save(self, path: str | Path) -> None:
        d = self.to_dict()
        d["dataset_root"] = str(Path(self.dataset_root).resolve())
        write_json(d, path)


def video_tag(video: VideoDir) -> str | None:
    p = video.scene_script_path()
    return json.loads(p.read_text()).get("split_tag") if p.is_file() else None


def _test_videos(m: ExperimentManifest, tags: tuple[str, ...] | None) -> list[VideoDir]:
    videos = DatasetRoot(m.dataset_root).test().videos()
    if tags is not None:
        videos = [v for v in videos if video_tag(v) in tags]
    if not videos:
        raise ContractError(f"no test videos under {m.dataset_root} match tags {tags}")
    return videos


# ---------------------------------------------------------------------------
# training


def train_models(m: ExperimentManifest, out_dir: str | Path, resume: bool = False) -> dict[str, Path]:
    """Train every selected branch into ``out_dir/<branch>/``; returns the checkpoint directories."""
    m.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m.save(out_dir / "manifest.json")
    arrays = load_training_arrays(DatasetRoot(m.dataset_root).train(), m.teacher_set, m.config)
    done = {}
    for kind in m.branch_selection:
        task = make_task(kind, m.config)
        bdir = out_dir / task.name
        last = bdir / "last"
        resume_from = last if resume and (last / "manifest.json").exists() else None
        train_branch(task, arrays, m.teacher_set, m.config, bdir, resume_from=resume_from)
        done[task.name] = bdir
    return done


def load_branch(checkpoint: str | Path) -> TrainedBranch:
    model, manifest, _ = load_checkpoint(checkpoint)
    t = manifest["meta"]["task"]
    attn_spec = model.attention.spec if model.attention is not None else None
    return TrainedBranch(BranchTask(t["kind"], model.spec, attn_spec, t["predict_future"]), model)


def load_branches(m: ExperimentManifest, checkpoints: str | Path) -> dict[str, TrainedBranch]:
    checkpoints = Path(checkpoints)
    missing, found = [], {}
    for kind in m.branch_selection:
        d = checkpoints / kind / "best"
        if not (d / "manifest.json").is_file():
            missing.append(kind)
            continue
        found[kind] = load_branch(d)
    if missing:
        raise CheckpointError(f"missing checkpoints for branch(es): {', '.join(missing)} under {checkpoints}")
    return found


# ---------------------------------------------------------------------------
# evaluation

REPORT_SCHEMA_PATH = Path(__file__).with_name("report_schema.json")


def report_schema() -> dict:
    return json.loads(REPORT_SCHEMA_PATH.read_text())


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, report_schema())


def _plot_scores(s: ScoreSeries, cfg: RunConfig, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 2.5))
    lab = s.labels.astype(bool)
    ax.fill_between(s.frames, 0, 1, where=lab, color="0.85", step="mid", label="anomalous")
    for b in s.relaxed:
        ax.plot(s.frames, s.normalized(b, cfg), label=b)
    ax.set_xlabel("frame")
    ax.set_ylabel("normalised score")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def _auc_or_none(fn, warnings: list[str], what: str):
    try:
        return fn()
    except UndefinedMetricError:
        msg = f"{what} has single-class labels; excluded from per-video AUC"
        log.warning(msg)
        warnings.append(msg)
        return None


def build_report(series: list[ScoreSeries], branches: list[str], m: ExperimentManifest,
                 dataset_hash: str, tags: dict[str, str | None]) -> dict:
    cfg = m.config
    warnings: list[str] = []
    auc = {}
    for b in BRANCH_KINDS:
        auc[b] = dataset_auc(series, cfg, b, warnings=warnings) if b in branches else None
    auc["fused"] = (dataset_auc(series, cfg, fuse=BRANCH_KINDS, warnings=warnings)
                    if all(b in branches for b in BRANCH_KINDS) else None)
    per_video = []
    for s in series:
        row = {}
        for b in branches:
            row[b] = _auc_or_none(lambda: frame_auc(s.normalized(b, cfg), s.labels), warnings,
                                  f"video {s.video_id}")
        if auc["fused"] is not None:
            fused = np.maximum(s.normalized(BRANCH_KINDS[0], cfg) / cfg.branch_thresholds[0],
                               s.normalized(BRANCH_KINDS[1], cfg) / cfg.branch_thresholds[1])
            row["fused"] = None if row[branches[0]] is None else frame_auc(fused, s.labels)
        per_video.append({"video_id": s.video_id, "split_tag": tags.get(s.video_id), "frames": len(s.frames),
                          "anomalous_frames": int(s.labels.sum()), "auc": row})
    return {
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "dataset_hash": dataset_hash,
        "teacher_set": m.teacher_set.to_dict(),
        "branches": list(branches),
        "auc_mode": cfg.auc_mode,
        "auc": auc,
        "per_video": per_video,
        "warnings": list(dict.fromkeys(warnings)),
    }


def evaluate(m: ExperimentManifest, checkpoints: str | Path, out_dir: str | Path,
             heatmaps: bool = True, plots: bool = True) -> dict:
    """Score the test split with trained branches; writes ``report.json``, scores, plots and heatmaps."""
    m.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    branches = load_branches(m, checkpoints)
    videos = _test_videos(m, m.eval_tags)
    series = []
    for v in videos:
        series.append(score_video(branches, m.teacher_set, v, m.config,
                                  heatmap_dir=out_dir / "heatmaps" if heatmaps else None))
    write_score_records(series, out_dir / "scores.jsonl")
    if plots:
        (out_dir / "plots").mkdir(exist_ok=True)
        for s in series:
            _plot_scores(s, m.config, out_dir / "plots" / f"{s.video_id}.png")
    report = build_report(series, list(branches), m, DatasetRoot(m.dataset_root).content_hash(),
                          {v.video_id: video_tag(v) for v in videos})
    validate_report(report)
    write_json(report, out_dir / "report.json")
    return report


# ---------------------------------------------------------------------------
# ablations


def _row_tasks(ablation: str, row: str, cfg: RunConfig) -> dict[str, BranchTask]:
    """Models needed for one ablation row, keyed by a cache name."""
    seg = make_task("appearance_motion", cfg, predict_future=False)
    pred = make_task("appearance_motion", cfg)
    if ablation == "proxy_tasks":
        ofm = make_task("motion", cfg)
        need = {"Seg": ["seg"], "OFM": ["ofm"], "Seg+Pred": ["pred"], "Seg+OFM": ["seg", "ofm"],
                "Seg+OFM+Pred": ["pred", "ofm"]}[row]
        pool = {"seg": seg, "pred": pred, "ofm": ofm}
        return {k: pool[k] for k in need}
    if ablation == "attention_mechanisms":
        pos = cfg.attention_position if cfg.attention_position != "none" else "decoder"
        pos, scse = {"UNet": ("none", False), "UNet+Att": (pos, False), "UNet+Att+SCSE": (pos, True)}[row]
        return {f"motion_{pos}_scse{int(scse)}": make_task("motion", cfg, attention_position=pos, scse_enabled=scse)}
    # the position study runs the context attention alone, without SCSE
    return {f"motion_{row}_scse0": make_task("motion", cfg, attention_position=row, scse_enabled=False)}


def _row_auc(keys: list[str], series: list[ScoreSeries], cfg: RunConfig, warnings: list[str]) -> float:
    if len(keys) == 1:
        return dataset_auc(series, cfg, keys[0], warnings=warnings)
    return dataset_auc(series, cfg, fuse=tuple(keys), warnings=warnings)


def ablate(m: ExperimentManifest, out_dir: str | Path, models_dir: str | Path | None = None) -> dict:
    """Run one ablation sweep under a single seed and return the ranked AUC table.

    Every row is trained and scored on the same dataset with the same seed;
    models shared between rows (e.g. the Seg student in Seg and Seg+OFM) are
    trained once. Models live under ``models_dir`` (default ``out_dir/models``);
    one whose recorded task, config, dataset and teachers all match is reused,
    which lets several sweeps share a directory.
    """
    m.validate()
    if m.ablation is None:
        raise ConfigError("manifest has no ablation selected")
    rows = m.rows
    if len(rows) < 2:
        raise ConfigError(f"an ablation sweep needs at least 2 configurations, got {len(rows)}")
    cfg = m.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m.save(out_dir / "manifest.json")
    tags = m.eval_tags
    if tags is None and m.ablation == "attention_mechanisms":
        tags = DIVERSE_TAGS

    dataset_hash = DatasetRoot(m.dataset_root).content_hash()
    arrays = load_training_arrays(DatasetRoot(m.dataset_root).train(), m.teacher_set, cfg)
    videos = _test_videos(m, tags)
    test_arrays = [(v, load_video_arrays(v, m.teacher_set, cfg)) for v in videos]

    row_keys = {r: _row_tasks(m.ablation, r, cfg) for r in rows}
    tasks: dict[str, BranchTask] = {}
    for r in rows:
        tasks.update(row_keys[r])
    models_dir = Path(models_dir) if models_dir is not None else out_dir / "models"
    trained: dict[str, TrainedBranch] = {}
    losses: dict[str, list[float]] = {}
    for key, task in tasks.items():
        mdir = models_dir / key
        prov = {"task": task.to_dict(), "config_hash": cfg.hash(), "dataset_hash": dataset_hash,
                "teacher_set": m.teacher_set.to_dict()}
        prov_path = mdir / "provenance.json"
        if prov_path.is_file() and json.loads(prov_path.read_text()) == prov and (mdir / "best").is_dir():
            log.info("reusing %s", mdir)
            losses[key] = load_checkpoint(mdir / "last")[1]["meta"]["losses"]
        else:
            prov_path.unlink(missing_ok=True)
            losses[key] = train_branch(task, arrays, m.teacher_set, cfg, mdir).losses
            write_json(prov, prov_path)
        trained[key] = load_branch(mdir / "best")
    series = [score_video(trained, m.teacher_set, v, cfg, arrays=a) for v, a in test_arrays]

    warnings: list[str] = []
    table = []
    for r in rows:
        keys = list(row_keys[r])
        # fused rows list the appearance-type model first so thresholds line up with records
        keys.sort(key=lambda k: k.startswith("ofm") or k.startswith("motion"))
        table.append({"row": r, "auc": _row_auc(keys, series, cfg, warnings), "models": keys,
                      "dataset_hash": dataset_hash, "seed": cfg.seed, "config_hash": cfg.hash()})
    for rank, row in enumerate(sorted(table, key=lambda t: (-t["auc"], rows.index(t["row"]))), start=1):
        row["rank"] = rank
    result = {"ablation": m.ablation, "eval_tags": list(tags) if tags is not None else None, "rows": table,
              "final_losses": {k: v[-1] for k, v in losses.items()}, "warnings": list(dict.fromkeys(warnings))}
    write_json(result, out_dir / "ablation.json")
    (out_dir / "ablation.md").write_text(format_table(result))
    return result


def format_table(result: dict) -> str:
    lines = [f"| {result['ablation']} | frame AUC | rank |", "|---|---|---|"]
    for r in result["rows"]:
        lines.append(f"| {r['row']} | {r['auc']:.4f} | {r['rank']} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# future-prediction contrast probe


@dataclass(frozen=True)
class ContrastResult:
    reversal_mass: float
    fast_mass: float
    frames: tuple[int, ...]
    all_reversal_mass: float
    all_fast_mass: float

    @property
    def ratio(self) -> float:
        """Mass ratio at the frames where the reversing sprite flips direction."""
        return self.reversal_mass / self.fast_mass if self.fast_mass > 0 else float("inf")

    @property
    def all_frames_ratio(self) -> float:
        return self.all_reversal_mass / self.all_fast_mass if self.all_fast_mass > 0 else float("inf")


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask, iterations=r) if r > 0 else mask


def contrast_probe(branch: TrainedBranch, cfg: RunConfig, out_dir: str | Path, seed: int = 0,
                   duration: int = 40, margin: int = 2) -> ContrastResult:
    """Anomaly-map mass of the appearance-motion student at a reversing walker vs a fast constant-velocity one.

    For each scored frame t the mass is summed inside each sprite's footprint
    at t and t+1, dilated by ``margin`` px. Only frames after both events have
    started and with both sprites fully in view count. The headline ratio uses
    the frames whose prediction target t+1 reverses the walker's direction;
    the all-frames ratio also includes the frames in between.
    """
    from .synthdata import contrast_script, render_scene, trajectory, write_video

    if branch.task.kind != "appearance_motion":
        raise ContractError("the contrast probe applies to the appearance-motion branch")
    out_dir = Path(out_dir)
    script = contrast_script(cfg, duration=duration, seed=seed)
    vdir = out_dir / "test" / script.video_id
    if vdir.exists():
        shutil.rmtree(vdir)
    write_video(script, cfg, vdir, pseudo_gt=False)
    teachers = TeacherSet()
    [video] = [v for v in DatasetRoot(out_dir).test().videos() if v.video_id == script.video_id]
    va = load_video_arrays(video, teachers, cfg)
    maps = branch_maps(branch, task_tensors(branch.task, [va]))
    inst = {r.frame.index: r.instances for r in render_scene(script, cfg)}
    step = np.diff(trajectory(script.sprites[0], script.anomaly_events, 0, script.duration), axis=0)
    start = max(e.frame_range[0] for e in script.anomaly_events)
    full = {t: _full_view(script, cfg, t) for t in inst}
    mass = {"rev": 0.0, "fast": 0.0, "all_rev": 0.0, "all_fast": 0.0}
    used = []
    for row, t in enumerate(va.indices):
        t = int(t)
        if t < start or not (full[t] and full[t + 1]):
            continue
        flips = float(np.dot(step[t], step[t - 1])) < 0  # step[t] moves frame t -> t+1
        for sprite, key in ((0, "rev"), (1, "fast")):
            foot = ((inst[t] // 8 == sprite) & (inst[t] >= 0)) | ((inst[t + 1] // 8 == sprite) & (inst[t + 1] >= 0))
            m = float(maps[row][_dilate(foot, margin)].sum())
            mass["all_" + key] += m
            if flips:
                mass[key] += m
        if flips:
            used.append(t)
    return ContrastResult(mass["rev"], mass["fast"], tuple(used), mass["all_rev"], mass["all_fast"])


def _full_view(script, cfg: RunConfig, t: int) -> bool:
    """Whether both contrast sprites lie entirely inside the frame at t."""
    from .synthdata import _parts, trajectory

    size = cfg.input_size
    for i in (0, 1):
        sp = script.sprites[i]
        if not sp.entry_frame <= t <= sp.exit_frame:
            return False
        centre = trajectory(sp, script.anomaly_events, i, script.duration)[t]
        for _, (px, py), _, (rx, ry) in _parts(sp, centre, t):
            if px - rx < 0 or py - ry < 0 or px + rx > size - 1 or py + ry > size - 1:
                return False
    return True


# ---------------------------------------------------------------------------
# pseudo-GT population


def populate_pseudo_gt(root: str | Path, teachers: TeacherSet, cfg: RunConfig) -> dict[str, int]:
    """Write ``pseudo_gt/{seg,flow,depth}`` for every video from the given teacher sources.

    Sources that already read from ``precomputed_files`` are left untouched.
    Returns the number of maps written per source.
    """
    from .core import frame_name, write_dense_map
    from .teachers import TeacherProvider

    ds = DatasetRoot(root)
    counts = {"seg": 0, "flow": 0, "depth": 0}
    videos = ds.train().videos() + ds.test().videos()
    if not videos:
        raise ContractError(f"no videos under {root}")
    for v in videos:
        prov = TeacherProvider(v, teachers, cfg)
        for src, fetch in (("seg", prov.seg), ("flow", prov.flow), ("depth", prov.depth)):
            if getattr(teachers, f"{src}_source") == "precomputed_files":
                continue
            d = v.path / "pseudo_gt" / src
            d.mkdir(parents=True, exist_ok=True)
            for i in prov.indices:
                write_dense_map(fetch(i), d / f"{frame_name(i)}.vadmap")
                counts[src] += 1
    return counts


DESK_CONFIG = RunConfig(input_size=64, unet_depth=2, base_width=16, epochs=20, loss="cross_entropy")
