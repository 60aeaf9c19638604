#!/usr/bin/env python3
"""Ablation sweep: full model vs each ablated variant, multi-seed means."""

import argparse
import sys

import numpy as np

from candle.experiments import ABLATION_SUITES, BenchConfig, run_ablation
from candle.training import TrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--mode", choices=["separate", "joint"], default="joint")
    parser.add_argument("--suites", default=",".join(ABLATION_SUITES))
    parser.add_argument("--tau-v", type=float, default=None)
    args = parser.parse_args()

    bcfg = BenchConfig()
    tcfg = TrainConfig(tau_v=args.tau_v)
    seeds = [int(s) for s in args.seeds.split(",")]
    print(f"{'suite':<20} {'d-base':>8} {'d-new':>8} {'d-harmonic':>11}")
    for suite in args.suites.split(","):
        deltas = [run_ablation(suite, bcfg, tcfg, seed, args.mode).deltas
                  for seed in seeds]
        mean = {k: float(np.mean([d[k] for d in deltas])) for k in ("base", "new", "harmonic")}
        print(f"{suite:<20} {100 * mean['base']:>+7.2f}p {100 * mean['new']:>+7.2f}p "
              f"{100 * mean['harmonic']:>+10.2f}p")
    return 0


if __name__ == "__main__":
    sys.exit(main())
