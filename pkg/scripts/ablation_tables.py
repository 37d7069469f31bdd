"""Run the three ablation sweeps on the synthetic benchmark and print their tables.

    python3 scripts/ablation_tables.py --out runs/ablations [--only attention_position]
"""

import argparse
from pathlib import Path

from mtlvad.experiments import ABLATIONS, DESK_CONFIG, ExperimentManifest, ablate, format_table
from mtlvad.synthdata import make_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablations")
    p.add_argument("--seed", type=int, default=DESK_CONFIG.seed)
    p.add_argument("--only", choices=ABLATIONS)
    args = p.parse_args()

    out = Path(args.out)
    cfg = DESK_CONFIG.replace(seed=args.seed)
    data = out / "data"
    if not data.exists():
        make_benchmark(cfg.seed, cfg, data)
    for ablation in [args.only] if args.only else ABLATIONS:
        result = ablate(ExperimentManifest(cfg, data, ablation=ablation), out / ablation, models_dir=out / "models")
        print(format_table(result))


if __name__ == "__main__":
    main()
