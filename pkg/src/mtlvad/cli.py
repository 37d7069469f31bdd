"""Command-line entry point: synth, pseudo-gt, train, eval, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from .core import ConfigError, ContractError, DenseMapFormatError, IngestionError, RunConfig, load_config
from .experiments import (
    DESK_CONFIG,
    ExperimentManifest,
    ablate,
    evaluate,
    format_table,
    populate_pseudo_gt,
    train_models,
)
from .nets import CheckpointError
from .scoring import UndefinedMetricError
from .synthdata import make_benchmark
from .teachers import TeacherSet
from .training import SemiSupervisedViolation, TrainingDivergedError

log = logging.getLogger("mtlvad")

DOCUMENTED_ERRORS = (ConfigError, ContractError, IngestionError, DenseMapFormatError, CheckpointError,
                     SemiSupervisedViolation, TrainingDivergedError, UndefinedMetricError, FileExistsError)


class CommandError(RuntimeError):
    pass


def _config(args) -> RunConfig | None:
    cfg = load_config(args.config) if args.config else None
    if args.seed is not None:
        cfg = (cfg or DESK_CONFIG).replace(seed=args.seed)
    return cfg


def _manifest(args) -> ExperimentManifest:
    m = ExperimentManifest.load(args.manifest)
    cfg = _config(args)
    if args.config:
        m.config = cfg
    elif args.seed is not None:
        m.config = m.config.replace(seed=args.seed)
    return m


def _out(args) -> Path:
    if not args.out:
        raise CommandError(f"{args.command} needs --out")
    return Path(args.out)


def cmd_synth(args) -> int:
    cfg = _config(args) or DESK_CONFIG
    seed = args.seed if args.seed is not None else cfg.seed
    out = _out(args)
    if not out.parent.exists():
        raise CommandError(f"parent directory does not exist: {out.parent}")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    inv = make_benchmark(seed, cfg, out)
    print(f"wrote {len(inv['train'])} train and {len(inv['test'])} test videos to {out}")
    for kind, n in inv["anomaly_counts"].items():
        print(f"  {kind}: {n}")
    return 0


def cmd_pseudo_gt(args) -> int:
    cfg = _config(args) or DESK_CONFIG
    teachers = TeacherSet(args.seg_source, args.flow_source, args.depth_source)
    counts = populate_pseudo_gt(args.dataset, teachers, cfg)
    print(json.dumps(counts, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    m = _manifest(args)
    done = train_models(m, _out(args), resume=args.resume)
    for name, d in done.items():
        print(f"{name}: {d}")
    return 0


def cmd_eval(args) -> int:
    m = _manifest(args)
    report = evaluate(m, args.checkpoints, _out(args), heatmaps=not args.no_heatmaps)
    print(json.dumps(report["auc"], sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    m = _manifest(args)
    if args.ablation:
        m.ablation = args.ablation
    result = ablate(m, _out(args))
    print(format_table(result), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="master seed (overrides config and manifest)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mtlvad", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic benchmark")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pseudo-gt", parents=[common], help="populate pseudo_gt/ from teacher sources")
    s.add_argument("--dataset", required=True)
    s.add_argument("--seg-source", default="oracle", choices=("oracle", "precomputed_files"))
    s.add_argument("--flow-source", default="builtin_estimator",
                   choices=("oracle", "precomputed_files", "builtin_estimator"))
    s.add_argument("--depth-source", default="oracle", choices=("oracle", "precomputed_files"))
    s.set_defaults(func=cmd_pseudo_gt)

    s = sub.add_parser("train", parents=[common], help="train the branches selected in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--resume", action="store_true", help="continue from <out>/<branch>/last")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score the test split and write report.json")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoints", required=True, help="directory written by `train`")
    s.add_argument("--no-heatmaps", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="run an ablation sweep and print the ranked table")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ablation", choices=("proxy_tasks", "attention_mechanisms", "attention_position"))
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, *DOCUMENTED_ERRORS) as e:
        print(f"mtlvad {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
