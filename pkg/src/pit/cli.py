"""Batch experiment runner: INI-configured commands over the engine.

Commands: warmup, search, sweep, extract, count, verify, enumerate.
Machine-readable outputs are line-delimited JSON records and PITD
checkpoints (with a JSON sidecar per checkpoint); human tables derive
from them.  Exit codes: 0 ok, 2 config error, 3 data error,
4 verification failure, 5 cap exceeded.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from io import StringIO

import numpy as np

from . import data as dataio
from . import export, search
from . import tensor as T
from .model import (BlockSpec, LayerSpec, NetworkSpec, TaskHead, build,
                    builtin_seed)

logger = logging.getLogger("pit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4
EXIT_CAP = 5

EPILOG = ("exit codes: 0 ok, 2 config error, 3 data error, "
          "4 verification failure, 5 cap exceeded")


class ConfigError(Exception):
    """Malformed or missing run configuration."""


class DataError(Exception):
    """Missing or malformed data/artifact files."""


# ------------------------------------------------------------ config schema

_BLOCK_RE = re.compile(r"^block\.(\d+)$")
_LAYER_RE = re.compile(r"^block\.(\d+)\.layer\.(\d+)$")

_KEYS = {
    "network": {"seed", "input_channels", "input_length", "head", "classes"},
    "block": {"residual"},
    "layer": {"kind", "c_out", "f", "stride", "batchnorm", "activation",
              "dropout", "searchable"},
    "data": {"format", "train_path", "test_path", "delimiter", "n", "t",
             "lags", "noise_std", "split", "seed"},
    "train": {"batch_size", "lr_weights", "lr_masks", "patience",
              "max_epochs", "rng_seed"},
    "nas": {"lambda", "lambda_list", "reg", "warmup", "finetune",
            "finetune_mode"},
}


@dataclass
class RunConfig:
    net_spec: NetworkSpec
    search_cfg: search.SearchConfig
    lambdas: list | None
    reg_kind: str
    finetune_mode: str
    data_cfg: dict


def _check_keys(cp: configparser.ConfigParser) -> None:
    for section in cp.sections():
        if section in ("network", "data", "train", "nas"):
            allowed = _KEYS[section]
        elif _BLOCK_RE.match(section):
            allowed = _KEYS["block"]
        elif _LAYER_RE.match(section):
            allowed = _KEYS["layer"]
        else:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")


def _cast(cp, section, key, conv, default):
    if not cp.has_option(section, key):
        if default is ...:
            raise ConfigError(f"[{section}] is missing required key {key!r}")
        return default
    raw = cp.get(section, key)
    try:
        if conv is bool:
            return cp.getboolean(section, key)
        return conv(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key} = {raw!r} is not a valid "
            f"{conv.__name__}") from None


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _parse_phase(text: str) -> search.Phase:
    # "N" = fixed epochs; "converge:P" or "converge:P:MAX" = early stopping
    try:
        if text.startswith("converge:"):
            parts = text.split(":")
            patience = int(parts[1])
            max_epochs = int(parts[2]) if len(parts) > 2 else 200
            return search.to_convergence(patience, max_epochs)
        return search.epochs(int(text))
    except (ValueError, IndexError):
        raise ConfigError(f"bad phase spec {text!r}; use an epoch count, "
                          f"'converge:P', or 'converge:P:MAX'") from None


def _phase_text(phase: search.Phase) -> str:
    if phase.n_epochs is not None:
        return str(phase.n_epochs)
    return f"converge:{phase.patience}:{phase.max_epochs}"


def _build_network(cp: configparser.ConfigParser) -> NetworkSpec:
    if not cp.has_section("network"):
        raise ConfigError("missing [network] section")
    if cp.has_option("network", "seed"):
        if len(cp["network"]) > 1:
            raise ConfigError("[network] seed shortcut excludes other keys")
        name = cp.get("network", "seed")
        try:
            return builtin_seed(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    blocks_found: dict = {}
    for section in cp.sections():
        m = _BLOCK_RE.match(section)
        if m:
            blocks_found.setdefault(int(m.group(1)), {})["residual"] = \
                cp.get(section, "residual", fallback="none")
        m = _LAYER_RE.match(section)
        if m:
            bi, li = int(m.group(1)), int(m.group(2))
            layer = LayerSpec(
                kind=_cast(cp, section, "kind", str, "conv1d"),
                c_out_seed=_cast(cp, section, "c_out", int, 1),
                f_seed=_cast(cp, section, "f", int, 1),
                stride=_cast(cp, section, "stride", int, 1),
                has_batchnorm=_cast(cp, section, "batchnorm", bool, False),
                activation=_cast(cp, section, "activation", str, "none"),
                dropout_rate=_cast(cp, section, "dropout", float, 0.0),
                searchable=_cast(cp, section, "searchable", bool, True),
            )
            blocks_found.setdefault(bi, {}).setdefault("layers", {})[li] = layer
    if not blocks_found:
        raise ConfigError("no [block.N] sections and no seed shortcut")
    blocks = []
    for bi in range(len(blocks_found)):
        if bi not in blocks_found:
            raise ConfigError(f"block indices must be contiguous; "
                              f"missing [block.{bi}]")
        entry = blocks_found[bi]
        layers = entry.get("layers", {})
        if sorted(layers) != list(range(len(layers))) or not layers:
            raise ConfigError(f"[block.{bi}] needs layer sections "
                              f"0..k without gaps")
        blocks.append(BlockSpec([layers[i] for i in range(len(layers))],
                                entry.get("residual", "none")))
    head = TaskHead(_cast(cp, "network", "head", str, "classification"),
                    _cast(cp, "network", "classes", int, ...))
    return NetworkSpec(_cast(cp, "network", "input_channels", int, ...),
                       _cast(cp, "network", "input_length", int, ...),
                       blocks, head)


def load_run_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    _check_keys(cp)

    try:
        net_spec = _build_network(cp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    try:
        cfg = search.SearchConfig(
            batch_size=_cast(cp, "train", "batch_size", int, 128),
            lr_weights=_cast(cp, "train", "lr_weights", float, 1e-3),
            lr_masks=_cast(cp, "train", "lr_masks", float, 1e-3),
            search_patience=_cast(cp, "train", "patience", int, 20),
            search_max_epochs=_cast(cp, "train", "max_epochs", int, 200),
            rng_seed=_cast(cp, "train", "rng_seed", int, 0),
            warmup=_parse_phase(_cast(cp, "nas", "warmup", str,
                                      "converge:10")),
            finetune=_parse_phase(_cast(cp, "nas", "finetune", str,
                                        "converge:10")),
            reg_kind=_cast(cp, "nas", "reg", str, "size"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    if cp.has_option("nas", "lambda") and cp.has_option("nas", "lambda_list"):
        raise ConfigError("[nas] lambda and lambda_list are exclusive")
    lambdas = None
    if cp.has_option("nas", "lambda"):
        lambdas = [_cast(cp, "nas", "lambda", float, ...)]
    elif cp.has_option("nas", "lambda_list"):
        lambdas = list(_cast(cp, "nas", "lambda_list", _floats, ...))

    mode = _cast(cp, "nas", "finetune_mode", str, "finetune")
    if mode not in ("finetune", "retrain"):
        raise ConfigError(f"finetune_mode must be finetune or retrain, "
                          f"got {mode!r}")

    fmt = _cast(cp, "data", "format", str, ...)
    if fmt not in ("synth", "ucr"):
        raise ConfigError(f"data format must be synth or ucr, got {fmt!r}")
    data_cfg = {"format": fmt,
                "split": _cast(cp, "data", "split", _floats, (0.7, 0.15, 0.15)),
                "seed": _cast(cp, "data", "seed", int, 0)}
    if fmt == "synth":
        for key in ("train_path", "test_path", "delimiter"):
            if cp.has_option("data", key):
                raise ConfigError(f"[data] {key} only applies to ucr format")
        data_cfg.update(n=_cast(cp, "data", "n", int, 3000),
                        t=_cast(cp, "data", "t", int, 32),
                        lags=_cast(cp, "data", "lags", _ints, (0, 4, 8)),
                        noise_std=_cast(cp, "data", "noise_std", float, 0.1))
    else:
        for key in ("n", "t", "lags", "noise_std"):
            if cp.has_option("data", key):
                raise ConfigError(f"[data] {key} only applies to synth format")
        data_cfg.update(
            train_path=_cast(cp, "data", "train_path", str, ...),
            test_path=_cast(cp, "data", "test_path", str, None),
            delimiter=_cast(cp, "data", "delimiter", str, None))
        if data_cfg["test_path"] and len(data_cfg["split"]) > 2 \
                and data_cfg["split"][2] > 0:
            raise ConfigError("the test split comes from test_path; use "
                              "two split fractions")

    return RunConfig(net_spec, cfg, lambdas, cfg.reg_kind, mode, data_cfg)


def default_lambda(net_spec: NetworkSpec) -> float:
    """Rule of thumb: one over the seed's weight count."""
    return 1.0 / export.count(build(net_spec, 0))[0]


def resolved_ini(run: RunConfig, lambdas: list) -> str:
    """The fully resolved configuration; rerunning it reproduces the run."""
    cp = configparser.ConfigParser(interpolation=None)
    spec = run.net_spec
    cp["network"] = {"input_channels": spec.input_channels,
                     "input_length": spec.input_length,
                     "head": spec.task_head.kind,
                     "classes": spec.task_head.n_out}
    for bi, block in enumerate(spec.blocks):
        cp[f"block.{bi}"] = {"residual": block.residual}
        for li, l in enumerate(block.layers):
            cp[f"block.{bi}.layer.{li}"] = {
                "kind": l.kind, "c_out": l.c_out_seed, "f": l.f_seed,
                "stride": l.stride, "batchnorm": l.has_batchnorm,
                "activation": l.activation, "dropout": l.dropout_rate,
                "searchable": l.searchable}
    cp["data"] = {k: (",".join(str(x) for x in v)
                      if isinstance(v, tuple) else v)
                  for k, v in run.data_cfg.items() if v is not None}
    cfg = run.search_cfg
    cp["train"] = {"batch_size": cfg.batch_size,
                   "lr_weights": cfg.lr_weights, "lr_masks": cfg.lr_masks,
                   "patience": cfg.search_patience,
                   "max_epochs": cfg.search_max_epochs,
                   "rng_seed": cfg.rng_seed}
    cp["nas"] = {"lambda_list": ",".join(f"{l:g}" for l in lambdas),
                 "reg": run.reg_kind,
                 "warmup": _phase_text(cfg.warmup),
                 "finetune": _phase_text(cfg.finetune),
                 "finetune_mode": run.finetune_mode}
    out = StringIO()
    cp.write(out)
    return out.getvalue()


# ------------------------------------------------------------ data loading


def load_dataset(run: RunConfig) -> dataio.Dataset:
    d = run.data_cfg
    if d["format"] == "synth":
        ds = dataio.synth_dilated_task(d["n"], d["t"], d["lags"],
                                       d["noise_std"], rng_seed=d["seed"])
        return dataio.split(ds, d["split"], rng_seed=d["seed"])
    try:
        train = dataio.load_ucr_csv(d["train_path"], d["delimiter"])
        tagged = dataio.split(train, d["split"], rng_seed=d["seed"])
        if not d["test_path"]:
            return tagged
        test = dataio.load_ucr_csv(d["test_path"], d["delimiter"],
                                   train=train)
    except FileNotFoundError as exc:
        raise DataError(f"data file not found: {exc.filename}") from None
    except dataio.ParseError as exc:
        raise DataError(str(exc)) from None
    inputs = np.concatenate([tagged.inputs.data, test.inputs.data])
    targets = np.concatenate([tagged.targets, test.targets])
    tags = np.concatenate([tagged.tags, test.tags])
    return dataio.Dataset(T.Tensor(inputs), targets, tags, train.norm_mean,
                          train.norm_std, train.label_names,
                          d["train_path"])


# ------------------------------------------------------------ shared steps


def _prepare(args):
    run = load_run_config(args.config)
    ds = load_dataset(run)
    lambdas = run.lambdas
    if getattr(args, "lam", None) is not None:
        lambdas = [args.lam]
    elif getattr(args, "lambdas", None):
        lambdas = list(_floats(args.lambdas))
    if lambdas is None:
        lambdas = [default_lambda(run.net_spec)]
        logger.info("no lambda given; defaulting to 1/seed_weights = %g",
                    lambdas[0])
    reg = getattr(args, "reg", None) or run.reg_kind
    if reg not in ("size", "ops"):
        raise ConfigError(f"reg must be size or ops, got {reg!r}")
    text = resolved_ini(run, lambdas)
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "config.resolved.ini"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
    logger.info("resolved config:\n%s", text)
    return run, ds, lambdas, reg


def _ensure_warmup(run: RunConfig, ds, outdir: str) -> str:
    cfg = run.search_cfg
    ckpt = os.path.join(outdir, f"warmup_s{cfg.rng_seed}.pitd")
    if os.path.exists(ckpt):
        logger.info("reusing warmup checkpoint %s", ckpt)
        return ckpt
    model = build(run.net_spec, cfg.rng_seed)
    history = search.warmup(model, ds, cfg)
    search.write_checkpoint(ckpt, model, cfg.rng_seed)
    search.dump_history(os.path.join(outdir, "warmup.history.jsonl"), history)
    if history:
        logger.info("warmup: %d epochs, val_loss %.4f, val_metric %.4f",
                    len(history), history[-1].val_loss,
                    history[-1].val_metric)
    return ckpt


def _point_line(p: search.ParetoPoint, on_front: bool = False) -> str:
    mark = " *" if on_front else ""
    return (f"lambda {p.lam:<12g} {p.metric_name} {p.metric_value:<10.4f} "
            f"weights {p.params:<8d} macs {p.macs}{mark}")


# ------------------------------------------------------------ commands


def cmd_warmup(args) -> int:
    run, ds, _, _ = _prepare(args)
    _ensure_warmup(run, ds, args.out)
    return EXIT_OK


def cmd_search(args) -> int:
    run, ds, lambdas, reg = _prepare(args)
    if args.warmup_ckpt:
        if not os.path.exists(args.warmup_ckpt):
            raise DataError(f"warmup checkpoint not found: "
                            f"{args.warmup_ckpt}")
        ckpt = args.warmup_ckpt
    else:
        ckpt = _ensure_warmup(run, ds, args.out)
    point = search.run_one(run.net_spec, ds, lambdas[0], reg,
                           run.search_cfg, ckpt, args.out,
                           retrain=run.finetune_mode == "retrain")
    rundir = os.path.dirname(point.checkpoint_path)
    with open(os.path.join(rundir, "history.jsonl"), encoding="utf-8") as fh:
        first = json.loads(fh.readline())
    print(f"epoch 0 terms: task {first['task_loss']:.6g}, "
          f"lambda*reg {first['reg_loss']:.6g}"
          + (f"  flags: {', '.join(first['flags'])}" if first["flags"] else ""))
    print(export.summary_table(point.arch))
    print(_point_line(point))
    search.dump_points(os.path.join(rundir, "metrics.jsonl"), [point])
    return EXIT_OK


def cmd_sweep(args) -> int:
    run, ds, lambdas, reg = _prepare(args)
    result = search.sweep(run.net_spec, ds, lambdas, run.search_cfg,
                          args.out, reg,
                          retrain=run.finetune_mode == "retrain",
                          workers=args.workers)
    search.dump_points(os.path.join(args.out, "pareto.jsonl"),
                       result.points, result.front)
    front = set(map(id, result.front))
    for p in result.points:
        print(_point_line(p, id(p) in front))
    for f in result.failures:
        print(f"failed: lambda {f.lam:g} ({f.error})", file=sys.stderr)
    if args.plot:
        _plot(result.points, result.front,
              os.path.join(args.out, "pareto.png"))
    if not result.points:
        raise DataError("every sweep point failed")
    return EXIT_OK


def cmd_extract(args) -> int:
    model = _load_ckpt(args.ckpt)
    arch = export.extract(model)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "arch.ini"), "w",
              encoding="utf-8") as fh:
        fh.write(export.arch_to_config(arch))
    print(export.summary_table(arch))
    return EXIT_OK


def cmd_count(args) -> int:
    if not os.path.exists(args.arch):
        raise DataError(f"architecture file not found: {args.arch}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(args.arch)
    if not cp.has_section("arch.totals"):
        raise DataError(f"{args.arch}: missing [arch.totals] section")
    totals = cp["arch.totals"]
    for key in ("params_weights_only", "params_with_bias", "macs"):
        if key not in totals:
            raise DataError(f"{args.arch}: missing {key}")
        print(f"{key} {totals[key]}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = _load_ckpt(args.ckpt)
    pruned = export.materialize(model, export.extract(model))
    report = export.verify_equivalence(model, pruned, trials=args.trials,
                                       tol=args.tol)
    print(f"trials {report.trials}  tol {report.tol:g}  "
          f"max_abs_diff {report.max_abs_diff:.3g}")
    if report.ok:
        print("verification passed")
        return EXIT_OK
    print(f"verification FAILED at block {report.offending_block} "
          f"(trial {report.worst_trial})")
    return EXIT_VERIFY


def cmd_enumerate(args) -> int:
    run = load_run_config(args.config)
    formula = export.formula_size(run.net_spec)
    try:
        report = export.enumerate_search_space(run.net_spec, cap=args.cap)
    except ValueError as exc:
        print(f"{exc}; formula estimate {formula:.3g}", file=sys.stderr)
        return EXIT_CAP
    print(f"enumerated {report.count}")
    print(f"formula {report.formula:.6g}")
    print(f"ratio {report.ratio:.4f}")
    return EXIT_OK


def _load_ckpt(path: str):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    if not os.path.exists(path + ".json"):
        raise DataError(f"checkpoint sidecar not found: {path}.json")
    try:
        return search.load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _plot(points, front, path) -> None:
    try:
        import matplotlib
    except ImportError:
        logger.warning("matplotlib unavailable; skipping plot")
        return
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, attr in zip(axes, ("params", "macs")):
        xs = [getattr(p, attr) for p in points]
        ys = [p.metric_value for p in points]
        ax.scatter(xs, ys, s=18, alpha=0.6, label="all points")
        fr = sorted(front, key=lambda p: getattr(p, attr))
        ax.plot([getattr(p, attr) for p in fr],
                [p.metric_value for p in fr], "o-", color="tab:red",
                label="front")
        ax.set_xscale("log")
        ax.set_xlabel(attr)
        ax.set_ylabel(points[0].metric_name if points else "metric")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info("wrote %s", path)


# ------------------------------------------------------------ entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pit",
        description="Train-and-prune engine for temporal convolutional "
                    "networks with differentiable architecture masks.",
        epilog=EPILOG)
    sub = parser.add_subparsers(dest="command")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, epilog=EPILOG)
        p.set_defaults(func=fn)
        return p

    p = add("warmup", cmd_warmup, "train seed weights, write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("search", cmd_search, "joint mask search + fine-tune for one "
                                  "regularization strength")
    p.add_argument("--config", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--reg", choices=("size", "ops"), default=None)
    p.add_argument("--warmup-ckpt", default=None)
    p.add_argument("--out", required=True)

    p = add("sweep", cmd_sweep, "search across a lambda grid, emit the "
                                "Pareto front")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", default=None,
                   help="comma-separated lambda values")
    p.add_argument("--reg", choices=("size", "ops"), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true",
                   help="write a metric-vs-cost scatter (needs matplotlib)")

    p = add("extract", cmd_extract, "read a checkpoint, emit the pruned "
                                    "architecture")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = add("count", cmd_count, "print the totals of an architecture file")
    p.add_argument("--arch", required=True)

    p = add("verify", cmd_verify, "check masked vs pruned forward "
                                  "equivalence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)

    p = add("enumerate", cmd_enumerate, "count the search space exactly and "
                                        "against the closed formula")
    p.add_argument("--config", required=True)
    p.add_argument("--cap", type=int, default=10 ** 6)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
