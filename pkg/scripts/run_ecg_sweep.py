#!/usr/bin/env python3
"""Pareto sweep of the ECG seed network on ECG5000.

Loads the UCR train/test files (run scripts/fetch_ecg5000.py first), splits
the 500-row train file 80/20 into train/validation, sweeps 8 log-spaced
lambda values across the size-regularizer range [5e-7, 7.5e-3], and prints
the accuracy/weights front measured on the 4500-row test split. Expect a
few hours on one CPU core; --lambdas with fewer points gives a quick look.
"""

import argparse
import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from pit import data, search
from pit.model import builtin_seed


def load_ecg(root: str) -> data.Dataset:
    for ext in (".tsv", ".txt", ".csv"):
        train_path = os.path.join(root, "ECG5000_TRAIN" + ext)
        test_path = os.path.join(root, "ECG5000_TEST" + ext)
        if os.path.exists(train_path) and os.path.exists(test_path):
            break
    else:
        raise SystemExit(f"ECG5000 files not found under {root}; "
                         f"run scripts/fetch_ecg5000.py")
    train_raw = data.load_ucr_csv(train_path)
    trval = data.split(train_raw, (0.8, 0.2), rng_seed=0)
    test_ds = data.load_ucr_csv(test_path, train=train_raw)
    return data.Dataset(
        inputs=np.concatenate([trval.inputs, test_ds.inputs]),
        targets=np.concatenate([trval.targets, test_ds.targets]),
        tags=np.concatenate([trval.tags, test_ds.tags]),
        norm_mean=trval.norm_mean, norm_std=trval.norm_std,
        label_names=trval.label_names)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/ECG5000")
    ap.add_argument("--out", default="runs/ecg5000")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--reg", choices=("size", "ops"), default="size")
    ap.add_argument("--lambdas", type=float, nargs="+",
                    help="explicit grid; default 8 log-spaced in [5e-7, 7.5e-3]")
    args = ap.parse_args(argv)

    ds = load_ecg(args.data)
    lambdas = args.lambdas or np.logspace(
        math.log10(5e-7), math.log10(7.5e-3), 8).tolist()
    cfg = search.SearchConfig(
        batch_size=128, lr_weights=1e-3, lr_masks=0.03,
        warmup=search.to_convergence(10, 150),
        search_patience=20, search_max_epochs=100,
        finetune=search.to_convergence(10, 60), rng_seed=args.seed)
    res = search.sweep(builtin_seed("ecg_tcn"), ds, lambdas, cfg, args.out,
                       reg_kind=args.reg)

    print(f"\n{'lambda':>12}  {'weights':>7}  {'MACs':>9}  {'test acc':>8}")
    for p in res.points:
        mark = " *" if p in res.front else ""
        print(f"{p.lam:>12.4g}  {p.params:>7d}  {p.macs:>9d}  "
              f"{p.metric_value:>8.4f}{mark}")
    for f in res.failures:
        print(f"{f.lam:>12.4g}  failed: {f.error}", file=sys.stderr)
    if res.front:
        weights = [p.params for p in res.front]
        best = max(p.metric_value for p in res.front)
        print(f"\nfront: {len(res.front)} points, weights "
              f"{min(weights)}..{max(weights)}, best test acc {best:.4f}")
    search.dump_points(os.path.join(args.out, "pareto.jsonl"),
                       res.points, res.front)
    return 0


if __name__ == "__main__":
    sys.exit(main())
