"""Training phases and sweeps: weight warmup, joint mask-and-weight search
with early stopping, fine-tuning, lambda sweeps, and Pareto fronts.

Phase structure: warmup trains weights only (masks stay at their all-ones
initialization), search trains weights and masks together on
task_loss + lambda * regularizer, fine-tune trains weights only with the
masks frozen at their searched values.  Every phase monitors validation
task loss per epoch; convergence phases stop after `patience` epochs
without improvement and restore the best epoch's state.

A sweep shares one warmup checkpoint across all lambda values, so every
search starts from bit-identical weights.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import costs, data as dataio, export
from . import tensor as T
from .model import NasModel, NetworkSpec, build

SHUFFLE_STREAM = 0x5E
EVAL_BATCH = 512
METRIC_HIGHER_IS_BETTER = {"accuracy": True, "mae": False}

FLAG_COST_ONLY = "degenerate: cost-only"
FLAG_ACCURACY_ONLY = "degenerate: accuracy-only"


@dataclass(frozen=True)
class Phase:
    """Either a fixed number of epochs or train-to-convergence."""

    n_epochs: int | None = None
    patience: int | None = None
    max_epochs: int = 200

    def __post_init__(self):
        if (self.n_epochs is None) == (self.patience is None):
            raise ValueError("set exactly one of n_epochs and patience")
        if self.n_epochs is not None and self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")


def epochs(n: int) -> Phase:
    return Phase(n_epochs=n)


def to_convergence(patience: int, max_epochs: int = 200) -> Phase:
    return Phase(patience=patience, max_epochs=max_epochs)


@dataclass
class SearchConfig:
    lam: float = 0.0
    reg_kind: str = "size"
    batch_size: int = 128
    lr_weights: float = 1e-3
    lr_masks: float = 1e-3
    warmup: Phase = field(default_factory=lambda: to_convergence(10))
    search_patience: int = 20
    search_max_epochs: int = 200
    finetune: Phase = field(default_factory=lambda: to_convergence(10))
    rng_seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.reg_kind not in ("size", "ops"):
            raise ValueError(f"unknown cost kind {self.reg_kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_weights <= 0 or self.lr_masks <= 0:
            raise ValueError("learning rates must be > 0")
        if self.search_patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    task_loss: float
    reg_loss: float
    val_loss: float
    val_metric: float
    flags: tuple = ()


@dataclass
class FinetuneResult:
    history: list
    metric_name: str
    val_metric: float
    test_metric: float
    flags: tuple = ()


@dataclass
class ParetoPoint:
    lam: float
    reg_kind: str
    metric_name: str
    metric_value: float
    params: int
    macs: int
    arch: export.EffectiveArch
    checkpoint_path: str = ""


@dataclass
class SweepFailure:
    lam: float
    reg_kind: str
    rng_seed: int
    error: str


@dataclass
class SweepResult:
    points: list
    front: list
    failures: list
    warmup_checkpoint: str


# ------------------------------------------------------------ evaluation


def metric_name_for(model: NasModel) -> str:
    return "accuracy" if model.spec.task_head.kind == "classification" else "mae"


def _splits(ds: dataio.Dataset):
    xtr, ytr = ds.part("train")
    if len(ytr) == 0:
        raise ValueError("empty training split")
    xv, yv = ds.part("val")
    if len(yv) == 0:
        xv, yv = xtr, ytr
    return xtr, ytr, xv, yv


def evaluate(model: NasModel, x: np.ndarray, y: np.ndarray,
             masked: bool = True) -> tuple[float, float]:
    """Mean task loss and metric (accuracy or mae) over one split."""
    classify = model.spec.task_head.kind == "classification"
    loss_sum = 0.0
    metric_sum = 0.0
    for i in range(0, len(y), EVAL_BATCH):
        xb, yb = x[i:i + EVAL_BATCH], y[i:i + EVAL_BATCH]
        out = model.forward(T.Tensor(xb), train_mode=False, masked=masked)
        if classify:
            loss = T.softmax_cross_entropy(out, yb)
            metric_sum += float((np.argmax(out.data, axis=1) == yb).sum())
        else:
            loss = T.mse_loss(out, yb)
            metric_sum += float(np.abs(out.data - yb).sum() / yb[0].size)
        loss_sum += float(loss.data) * len(yb)
    return loss_sum / len(y), metric_sum / len(y)


# ------------------------------------------------------------ phase runner


def _batch_order(n: int, batch_size: int, seed: int, epoch: int):
    rng = np.random.Generator(np.random.Philox(
        seed=[seed, SHUFFLE_STREAM, epoch]))
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _snapshot(model: NasModel) -> dict:
    return {k: v.copy() for k, v in model.state_dict().items()}


def _degeneracy_flags(model, x, y, cfg) -> tuple:
    """Compare the two loss terms before any search step."""
    out = model.forward(T.Tensor(x[:cfg.batch_size]), train_mode=False)
    if model.spec.task_head.kind == "classification":
        task = T.softmax_cross_entropy(out, y[:cfg.batch_size])
    else:
        task = T.mse_loss(out, y[:cfg.batch_size])
    _, parts = costs.total_loss(task, model, cfg.lam, cfg.reg_kind)
    ratio = parts["reg_weighted"] / max(parts["task"], 1e-12)
    if ratio > 100.0:
        return (FLAG_COST_ONLY,)
    if ratio < 0.01:
        return (FLAG_ACCURACY_ONLY,)
    return ()


def _run_phase(model: NasModel, ds: dataio.Dataset, cfg: SearchConfig,
               phase_name: str, plan: Phase, train_masks: bool,
               masked: bool, flags: tuple = ()) -> list:
    xtr, ytr, xv, yv = _splits(ds)
    classify = model.spec.task_head.kind == "classification"
    weight_opt = T.Adam([t for _, t in model.named_params()],
                        lr=cfg.lr_weights)
    mask_tensors = [t for _, t in model.named_mask_params()]
    mask_opt = T.Adam(mask_tensors, lr=cfg.lr_masks) if train_masks else None
    lam = cfg.lam if train_masks else 0.0

    history: list = []
    best_val = np.inf
    best_epoch = -1
    best_state = None
    limit = plan.n_epochs if plan.n_epochs is not None else plan.max_epochs

    for epoch in range(limit):
        task_sum = 0.0
        reg_sum = 0.0
        seen = 0
        for bi, idx in enumerate(_batch_order(len(ytr), cfg.batch_size,
                                              cfg.rng_seed, epoch)):
            xb = T.Tensor(xtr[idx])
            with T.Tape() as tape:
                out = model.forward(xb, train_mode=True, masked=masked,
                                    dropout_key=(cfg.rng_seed, epoch, bi))
                if classify:
                    task = T.softmax_cross_entropy(out, ytr[idx])
                else:
                    task = T.mse_loss(out, ytr[idx])
                loss, parts = costs.total_loss(task, model, lam, cfg.reg_kind)
                tape.backward(loss)
            weight_opt.step()
            if mask_opt is not None:
                mask_opt.step()
            weight_opt.zero_grad()
            for t in mask_tensors:
                t.zero_grad()
            task_sum += parts["task"] * len(idx)
            reg_sum += parts["reg_weighted"] * len(idx)
            seen += len(idx)

        val_loss, val_metric = evaluate(model, xv, yv, masked=masked)
        history.append(EpochRecord(phase_name, epoch, task_sum / seen,
                                   reg_sum / seen, val_loss, val_metric,
                                   flags if epoch == 0 else ()))
        if plan.patience is not None:
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch
                best_state = _snapshot(model)
            elif epoch - best_epoch >= plan.patience:
                break
    if plan.patience is not None and best_state is not None:
        model.load_state_dict(best_state)
    return history


# ------------------------------------------------------------ phases


def warmup(model: NasModel, ds: dataio.Dataset, cfg: SearchConfig) -> list:
    """Weight-only training from the all-ones mask state.

    Masked and unmasked forwards coincide at initialization, so the
    masks stay out of the graph entirely.  Returns the epoch history;
    the trained weights live in the model.
    """
    return _run_phase(model, ds, cfg, "warmup", cfg.warmup,
                      train_masks=False, masked=False)


def search(model: NasModel, ds: dataio.Dataset,
           cfg: SearchConfig) -> tuple[NasModel, list]:
    """Joint weight-and-mask training on task loss + lambda * regularizer.

    Stops once validation task loss has not improved for search_patience
    epochs and restores the best epoch's weights and masks.  Runs whose
    two loss terms start out wildly unbalanced are flagged in the first
    epoch record, but still complete.
    """
    xtr, ytr, _, _ = _splits(ds)
    flags = _degeneracy_flags(model, xtr, ytr, cfg)
    plan = to_convergence(cfg.search_patience, cfg.search_max_epochs)
    history = _run_phase(model, ds, cfg, "search", plan,
                         train_masks=True, masked=True, flags=flags)
    return model, history


def finetune(model: NasModel, ds: dataio.Dataset, cfg: SearchConfig,
             from_scratch: bool = False) -> FinetuneResult:
    """Weight-only training with masks frozen at their searched values.

    With from_scratch=True the weights are re-drawn from the init
    distribution first (the masks, and so the architecture, are kept).
    Reports the test-split metric, falling back to validation when the
    dataset has no test rows.
    """
    if from_scratch:
        fresh = build(model.spec, cfg.rng_seed)
        for (_, t), (_, ft) in zip(model.named_params(),
                                   fresh.named_params()):
            t.data[...] = ft.data
        for unit, funit in zip(model.iter_units(), fresh.iter_units()):
            if getattr(unit, "bn", None) is not None:
                unit.bn.running_mean[:] = funit.bn.running_mean
                unit.bn.running_var[:] = funit.bn.running_var
    history = _run_phase(model, ds, cfg, "finetune", cfg.finetune,
                         train_masks=False, masked=True)
    _, _, xv, yv = _splits(ds)
    _, val_metric = evaluate(model, xv, yv)
    xte, yte = ds.part("test")
    flags: tuple = ()
    if len(yte):
        _, test_metric = evaluate(model, xte, yte)
    else:
        test_metric, flags = val_metric, ("no-test-split",)
    return FinetuneResult(history, metric_name_for(model), val_metric,
                          test_metric, flags)


# ------------------------------------------------------------ sweeps


def pareto_filter(points: list, cost_attr: str = "params") -> list:
    """Non-dominated subset: a point falls when another has a
    better-or-equal metric at strictly lower cost; exact duplicates
    keep the earliest."""
    if not points:
        return []
    names = {p.metric_name for p in points}
    if len(names) > 1:
        raise ValueError(f"mixed metric names: {sorted(names)}")
    higher = METRIC_HIGHER_IS_BETTER[names.pop()]

    def gain(p):
        return p.metric_value if higher else -p.metric_value

    def cost(p):
        return getattr(p, cost_attr)

    order = sorted(range(len(points)), key=lambda i: (cost(points[i]), i))
    kept = []
    best_cheaper = -np.inf
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and cost(points[order[j]]) == cost(points[order[i]]):
            j += 1
        group = [order[k] for k in range(i, j)]
        seen_pairs = set()
        for pi in sorted(group):
            p = points[pi]
            if best_cheaper >= gain(p) or gain(p) in seen_pairs:
                continue
            seen_pairs.add(gain(p))
            kept.append(pi)
        best_cheaper = max([best_cheaper] + [gain(points[k]) for k in group])
        i = j
    return [points[k] for k in sorted(kept)]


def write_checkpoint(path: str, model: NasModel, rng_seed: int) -> None:
    """Checkpoint plus a JSON sidecar describing the network, so the
    model can be rebuilt from the files alone."""
    dataio.save_tensors(path, model.state_dict())
    from .model import spec_to_dict
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump({"spec": spec_to_dict(model.spec), "rng_seed": rng_seed},
                  fh, indent=1)


def load_checkpoint(path: str) -> NasModel:
    from .model import spec_from_dict
    with open(path + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    model = build(spec_from_dict(meta["spec"]), meta["rng_seed"])
    model.load_state_dict(dataio.load_tensors(path))
    return model


def run_one(net_spec: NetworkSpec, ds: dataio.Dataset, lam: float,
            reg_kind: str, base_cfg: SearchConfig, ckpt: str,
            workdir: str, retrain: bool = False) -> ParetoPoint:
    """Search + fine-tune a single lambda into its own run directory."""
    cfg = replace(base_cfg, lam=lam, reg_kind=reg_kind)
    model = build(net_spec, cfg.rng_seed)
    model.load_state_dict(dataio.load_tensors(ckpt))
    _, history = search(model, ds, cfg)
    ft = finetune(model, ds, cfg, from_scratch=retrain)
    arch = export.extract(model)
    rundir = os.path.join(workdir, f"lam{lam:g}_{reg_kind}_s{cfg.rng_seed}")
    os.makedirs(rundir, exist_ok=True)
    path = os.path.join(rundir, "model.pitd")
    write_checkpoint(path, model, cfg.rng_seed)
    with open(os.path.join(rundir, "arch.ini"), "w", encoding="utf-8") as fh:
        fh.write(export.arch_to_config(arch))
    dump_history(os.path.join(rundir, "history.jsonl"), history + ft.history)
    return ParetoPoint(lam, reg_kind, ft.metric_name, ft.test_metric,
                       arch.params_weights_only, arch.macs, arch, path)


def sweep(net_spec: NetworkSpec, ds: dataio.Dataset, lambdas,
          base_cfg: SearchConfig, workdir: str,
          reg_kind: str | None = None, retrain: bool = False,
          workers: int = 1) -> SweepResult:
    """One search + fine-tune per lambda, off a shared warmup checkpoint.

    Duplicate (lambda, reg_kind, rng_seed) combinations run once.  A
    failing run is recorded and skipped; the sweep continues.  Runs are
    independent, so workers > 1 fans them out across processes; results
    merge in lambda order either way.
    """
    reg_kind = reg_kind or base_cfg.reg_kind
    os.makedirs(workdir, exist_ok=True)
    ckpt = os.path.join(workdir, f"warmup_s{base_cfg.rng_seed}.pitd")
    if not os.path.exists(ckpt):
        model = build(net_spec, base_cfg.rng_seed)
        warmup(model, ds, base_cfg)
        write_checkpoint(ckpt, model, base_cfg.rng_seed)

    todo = []
    seen = set()
    for lam in lambdas:
        key = (float(lam), reg_kind, base_cfg.rng_seed)
        if key not in seen:
            seen.add(key)
            todo.append(float(lam))

    points: list = []
    failures: list = []

    def settle(lam, resolve):
        try:
            points.append(resolve())
        except Exception as exc:
            failures.append(SweepFailure(lam, reg_kind, base_cfg.rng_seed,
                                         str(exc)))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(lam, pool.submit(run_one, net_spec, ds, lam,
                                         reg_kind, base_cfg, ckpt, workdir,
                                         retrain)) for lam in todo]
            for lam, fut in futures:
                settle(lam, fut.result)
    else:
        for lam in todo:
            settle(lam, lambda: run_one(net_spec, ds, lam, reg_kind,
                                        base_cfg, ckpt, workdir, retrain))
    return SweepResult(points, pareto_filter(points), failures, ckpt)


# ------------------------------------------------------------ serialization


def dump_history(path: str, records: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def dump_points(path: str, points: list, front: list | None = None) -> None:
    on_front = {id(p) for p in front} if front is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            row = {"lambda": p.lam, "reg_kind": p.reg_kind,
                   "metric_name": p.metric_name,
                   "metric_value": p.metric_value, "params": p.params,
                   "macs": p.macs, "checkpoint": p.checkpoint_path}
            if on_front is not None:
                row["on_front"] = id(p) in on_front
            fh.write(json.dumps(row) + "\n")
