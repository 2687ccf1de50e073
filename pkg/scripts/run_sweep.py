#!/usr/bin/env python3
"""Deviation sweep (10/20/40%) with noise-contaminated training, averaged over seeds."""

import argparse
import sys

import numpy as np

from selfinfo_ads.evaluation import SweepConfig, deviation_sweep
from selfinfo_ads.synth import gen_drive_trace


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--samples", type=int, default=60_000)
    p.add_argument("--noise", type=float, default=SweepConfig.noise_kmh)
    args = p.parse_args(argv)

    levels = (10.0, 20.0, 40.0)
    fpr = {d: [] for d in levels}
    dr = {d: [] for d in levels}
    for seed in range(args.seeds):
        _, clean = gen_drive_trace("urban", args.samples, seed)
        for d, r in deviation_sweep(clean, levels, SweepConfig(seed=seed, n_samples=args.samples,
                                                               noise_kmh=args.noise)):
            fpr[d].append(r.fpr_events)
            dr[d].append(r.detection_rate)
    print("deviation_pct,mean_fpr_events,mean_detection_rate")
    for d in levels:
        print(f"{d:g},{np.mean(fpr[d]):.4f},{np.mean(dr[d]):.4f}")
    means = [np.mean(fpr[d]) for d in levels]
    return 0 if means[2] <= means[1] <= means[0] else 1


if __name__ == "__main__":
    sys.exit(main())
