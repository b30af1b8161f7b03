#!/usr/bin/env python3
"""Stage-1 lambda sweep on a fine grid from one trained model, with timing versus training."""

import argparse
import time

import numpy as np

from fedrec.federation import load_global_model, run_federated_training
from fedrec.harness import compute_scores, format_sweep, load_config, prepare_data, sensitivity_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/synthetic.json")
    ap.add_argument("--model", help="checkpoint directory; trains from scratch when omitted")
    ap.add_argument("--points", type=int, default=21)
    args = ap.parse_args()

    cfg = load_config(args.config)
    catalog, split = prepare_data(cfg)
    t0 = time.perf_counter()
    model = load_global_model(args.model) if args.model else run_federated_training(split, catalog, cfg.rounds)
    train_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    scores = compute_scores(model, split.test_users, catalog, cfg.template)
    rows = sensitivity_sweep(scores, catalog, cfg.hybrid, np.linspace(0.0, 1.0, args.points).round(4).tolist())
    sweep_s = time.perf_counter() - t0

    print(format_sweep(rows))
    print(f"\ntraining {train_s:.2f}s, sweep of {len(rows)} lambdas {sweep_s:.2f}s")


if __name__ == "__main__":
    main()
