#!/usr/bin/env python3
"""Sweep the size regularizer on the synthetic lagged-sum task.

Trains the synth_small seed on synth_dilated_task(lags=(0, 4, 8)) over a
log-spaced lambda grid for several rng seeds, then reports every extracted
architecture with its weight count, dilations, and validation accuracy.
The defaults reproduce the dilation-discovery acceptance run in about five
minutes on one CPU core.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from pit import data, export, search
from pit.model import build, builtin_seed


def run_seed(seed: int, lambdas, out_dir: str, args) -> None:
    ds = data.split(
        data.synth_dilated_task(args.samples, t=32, lags=(0, 4, 8),
                                noise_std=0.1, rng_seed=seed),
        (0.8, 0.2), rng_seed=seed)
    cfg = search.SearchConfig(
        batch_size=128, lr_weights=1e-3, lr_masks=args.lr_masks,
        warmup=search.to_convergence(10, 100),
        search_patience=20, search_max_epochs=80,
        finetune=search.to_convergence(5, 40), rng_seed=seed)
    spec = builtin_seed("synth_small")
    res = search.sweep(spec, ds, lambdas, cfg, out_dir, reg_kind="size")

    warm = search.load_checkpoint(res.warmup_checkpoint)
    xv, yv = ds.part("val")
    _, warm_acc = search.evaluate(warm, xv, yv)
    seed_weights = export.count(build(spec, seed))[0]
    print(f"\nrng_seed {seed}: warmup val acc {warm_acc:.4f}, "
          f"seed {seed_weights} weights")
    print(f"{'lambda':>12}  {'weights':>7}  {'val acc':>7}  layers (C, F, d)")
    for p in res.points:
        layers = [(len(la.kept_channels), la.receptive_field, la.dilation)
                  for la in p.arch.layers if not la.eliminated]
        mark = " *" if p in res.front else ""
        print(f"{p.lam:>12.4g}  {p.params:>7d}  {p.metric_value:>7.4f}  "
              f"{layers}{mark}")
    for f in res.failures:
        print(f"{f.lam:>12.4g}  failed: {f.error}", file=sys.stderr)
    search.dump_points(os.path.join(out_dir, "pareto.jsonl"),
                       res.points, res.front)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/synth")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lambdas", type=float, nargs="+",
                    help="explicit grid; default 6 log-spaced in [1e-4, 1e-2]")
    ap.add_argument("--samples", type=int, default=2048)
    ap.add_argument("--lr-masks", type=float, default=0.03)
    args = ap.parse_args(argv)
    lambdas = args.lambdas or np.logspace(-4, -2, 6).tolist()
    for seed in args.seeds:
        run_seed(seed, lambdas, os.path.join(args.out, f"s{seed}"), args)
    print(f"\nartifacts under {args.out}/ (one subdirectory per lambda, "
          f"'*' marks the per-seed front)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
