"""Compare the appearance-motion anomaly map at a reversing walker and at a fast walker.

    python3 scripts/contrast.py --checkpoint runs/bench/checkpoints/appearance_motion/best
"""

import argparse

from mtlvad.experiments import DESK_CONFIG, contrast_probe, load_branch


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="runs/contrast")
    p.add_argument("--seeds", type=int, default=3, help="background seeds to average over")
    args = p.parse_args()

    branch = load_branch(args.checkpoint)
    for seed in range(args.seeds):
        r = contrast_probe(branch, DESK_CONFIG, args.out, seed=seed)
        print(f"seed {seed}: reversal {r.reversal_mass:.1f} fast {r.fast_mass:.1f} "
              f"ratio {r.ratio:.2f} (all frames {r.all_frames_ratio:.2f}, {len(r.frames)} flip frames)")


if __name__ == "__main__":
    main()
