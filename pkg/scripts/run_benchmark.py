"""Synthesise the benchmark, train both branches and write the evaluation report.

    python3 scripts/run_benchmark.py --out runs/bench
"""

import argparse
import json
import time
from pathlib import Path

from mtlvad.experiments import DESK_CONFIG, ExperimentManifest, evaluate, train_models
from mtlvad.synthdata import make_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/bench")
    p.add_argument("--seed", type=int, default=DESK_CONFIG.seed)
    p.add_argument("--epochs", type=int, default=DESK_CONFIG.epochs)
    args = p.parse_args()

    out = Path(args.out)
    cfg = DESK_CONFIG.replace(seed=args.seed, epochs=args.epochs)
    data = out / "data"
    if not data.exists():
        inv = make_benchmark(cfg.seed, cfg, data)
        print("anomaly events:", inv["anomaly_counts"])
    m = ExperimentManifest(cfg, data)
    t0 = time.time()
    train_models(m, out / "checkpoints")
    print(f"trained in {time.time() - t0:.0f}s")
    report = evaluate(m, out / "checkpoints", out / "eval")
    print(json.dumps(report["auc"], indent=2))


if __name__ == "__main__":
    main()
