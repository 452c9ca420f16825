"""Turn binarized masks into concrete pruned architectures.

extract() reads the current hard masks and produces an EffectiveArch: per
searchable layer the kept channel indices, kept taps, dilation d (2^z for
z zeroed dilation-mask levels), receptive field F (largest kept tap + 1)
and kernel size K = (F-1)/d + 1, plus integer parameter/MAC totals for the
whole pruned network.

materialize() builds a standalone pruned model from those index sets by
slicing weights, biases and batchnorm state. Layer elimination follows the
zero-propagation semantics of the masked forward pass:

  - a layer with no kept channels outputs exact zeros, so it and everything
    upstream of it inside the block is dropped;
  - a live layer downstream of a dropped one sees no input channels and
    degenerates to a bias generator (constant over time);
  - an identity-residual block whose main path died reduces to the skip
    path; the block output channel set is the union of both operands.

verify_equivalence() drives both models with the same random inputs and
reports the worst absolute output difference, scanning block outputs to
name the first diverging block when the tolerance is exceeded.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .masks import compute_masks
from .model import ConvUnit, NasModel, NetworkSpec, PoolUnit, build


@dataclass
class LayerArch:
    name: str
    kept_channels: list[int]
    kept_in: list[int]
    kept_taps: list[int]
    dilation: int
    receptive_field: int
    kernel_size: int
    eliminated: bool


@dataclass
class EffectiveArch:
    layers: list[LayerArch]
    params_weights_only: int
    params_with_bias: int
    macs: int

    def layer(self, name: str) -> LayerArch:
        for la in self.layers:
            if la.name == name:
                return la
        raise KeyError(name)


def _binarized_state(unit: ConvUnit):
    """Kept channels/taps and (d, F, K) from the unit's hard masks."""
    if unit.mask is None:
        f = unit.spec.f_seed
        return (list(range(unit.spec.c_out_seed)), list(range(f)), 1, f, f)
    outs = compute_masks(unit.mask, unit.force_keep)
    a = outs.theta_a_bin.data
    b = outs.theta_b_bin.data
    g = outs.theta_gamma_bin.data
    kept = [i for i in range(a.size) if a[i] != 0.0]
    f = unit.mask.f_seed
    if f == 1:
        return kept, [0], 1, 1, 1
    if np.any(np.diff(b) > 0):
        raise RuntimeError(f"{unit.name}: tap mask is not a prefix: {b}")
    alive = [i for i in range(1, f) if g[i] != 0.0]
    d = alive[0] if alive else 0
    if d and (d & (d - 1) or any(i % d for i in alive)):
        raise RuntimeError(f"{unit.name}: irregular dilation pattern: {g}")
    taps = [i for i in range(f) if b[i] != 0.0 and g[i] != 0.0]
    if not taps or taps[0] != 0:
        raise RuntimeError(f"{unit.name}: tap 0 must survive, got {taps}")
    f_eff = taps[-1] + 1
    d_eff = d if f_eff > 1 else 1
    k_eff = (f_eff - 1) // d_eff + 1
    if len(taps) != k_eff:
        raise RuntimeError(f"{unit.name}: taps {taps} are not regular at d={d_eff}")
    return kept, taps, d_eff, f_eff, k_eff


@dataclass
class _UnitPlan:
    unit: object
    is_pool: bool
    kept_in: list[int]
    kept_out: list[int]
    kept_taps: Optional[list[int]]
    d: int = 1
    f: int = 0
    k: int = 0
    eliminated: bool = False
    generator: bool = False


@dataclass
class _BlockPlan:
    name: str
    block: object
    units: list[_UnitPlan]
    skip: Optional[_UnitPlan]
    passthrough: bool
    live_in: list[int]
    live_out: list[int]
    main_pos: Optional[list[int]] = None  # identity add positions in the union
    in_pos: Optional[list[int]] = None


def _plan(model: NasModel) -> list[_BlockPlan]:
    plans: list[_BlockPlan] = []
    live = list(range(model.spec.input_channels))
    for bi, block in enumerate(model.blocks):
        live_in = live
        unit_plans: list[_UnitPlan] = []
        cur = live
        for unit in block.units:
            if isinstance(unit, PoolUnit):
                unit_plans.append(_UnitPlan(unit, True, cur, cur, None))
                continue
            kept, taps, d, f, k = _binarized_state(unit)
            unit_plans.append(_UnitPlan(unit, False, cur, kept, taps, d, f, k))
            cur = kept
        # everything up to the last dead conv only feeds dead layers
        dead = [i for i, p in enumerate(unit_plans)
                if not p.is_pool and not p.kept_out]
        convs_alive = [i for i, p in enumerate(unit_plans)
                       if not p.is_pool and p.kept_out]
        if dead:
            cut = max(dead)
            first_alive = min((i for i in convs_alive if i > cut), default=None)
            for i, p in enumerate(unit_plans):
                if i <= cut or (first_alive is not None and i < first_alive):
                    p.eliminated = True
            if first_alive is not None:
                unit_plans[first_alive].kept_in = []
                unit_plans[first_alive].generator = True
        has_convs = any(not p.is_pool for p in unit_plans)
        main_dead = has_convs and not convs_alive
        skip_plan = None
        passthrough = False
        if main_dead:
            if block.spec.residual != "identity":
                raise RuntimeError(f"block{bi}: main path died without a skip")
            for p in unit_plans:
                p.eliminated = True
            passthrough = True
            live = live_in
        else:
            main_out = cur
            if block.spec.residual == "pointwise":
                kept, taps, d, f, k = _binarized_state(block.skip)
                if kept != main_out:
                    raise RuntimeError(f"block{bi}: skip channels {kept} "
                                       f"disagree with main {main_out}")
                skip_plan = _UnitPlan(block.skip, False, live_in, kept, taps,
                                      d, f, k)
                live = main_out
            elif block.spec.residual == "identity":
                union = sorted(set(live_in) | set(main_out))
                live = union
            else:
                live = main_out
        plan = _BlockPlan(f"block{bi}", block, unit_plans, skip_plan,
                          passthrough, live_in, live)
        if block.spec.residual == "identity" and not passthrough:
            plan.main_pos = [live.index(c) for c in cur]
            plan.in_pos = [live.index(c) for c in live_in]
        plans.append(plan)
    return plans


def _count_plans(model: NasModel, plans: list[_BlockPlan]):
    weights = biases = macs = 0
    for plan in plans:
        for p in [*plan.units, *([plan.skip] if plan.skip else [])]:
            if p.is_pool or p.eliminated:
                continue
            w = len(p.kept_in) * len(p.kept_out) * p.k
            weights += w
            biases += len(p.kept_out)
            macs += w * p.unit.t_out
    live_final = plans[-1].live_out
    t_final = model.blocks[-1].t_out
    n_out = model.spec.task_head.n_out
    head_w = len(live_final) * t_final * n_out
    weights += head_w
    biases += n_out
    macs += head_w
    return weights, weights + biases, macs


def extract(model: NasModel) -> EffectiveArch:
    """EffectiveArch of the current hard-mask state."""
    plans = _plan(model)
    layers = []
    for plan in plans:
        for p in [*plan.units, *([plan.skip] if plan.skip else [])]:
            if p.is_pool or p.unit.mask is None:
                continue
            if p.eliminated or not p.kept_out:
                layers.append(LayerArch(p.unit.name, [], [], [], 1, 0, 0, True))
            else:
                layers.append(LayerArch(p.unit.name, list(p.kept_out),
                                        list(p.kept_in), list(p.kept_taps),
                                        p.d, p.f, p.k, False))
    weights, with_bias, macs = _count_plans(model, plans)
    return EffectiveArch(layers, weights, with_bias, macs)


# ------------------------------------------------------------ pruned model


class PrunedConv:
    def __init__(self, name, w, b, bn, stride, dilation, activation, t_out):
        self.name = name
        self.w = T.Tensor(w)
        self.b = T.Tensor(b)
        self.bn = bn
        self.stride = stride
        self.dilation = dilation
        self.activation = activation
        self.t_out = t_out

    def forward(self, x: T.Tensor, train_mode: bool = False) -> T.Tensor:
        y = T.conv1d(x, self.w, self.b, stride=self.stride,
                     dilation=self.dilation)
        if self.bn is not None:
            y = T.batchnorm1d(y, self.bn, train_mode)
        if self.activation == "relu":
            y = T.relu(y)
        return y


class PrunedGenerator:
    """A conv whose entire input died: emits its bias, constant over time."""

    def __init__(self, name, b, bn, activation, t_out):
        self.name = name
        self.b = T.Tensor(b)
        self.bn = bn
        self.activation = activation
        self.t_out = t_out

    def forward(self, x: T.Tensor, train_mode: bool = False) -> T.Tensor:
        batch = x.shape[0]
        data = np.broadcast_to(self.b.data[None, :, None],
                               (batch, self.b.shape[0], self.t_out)).copy()
        y = T.Tensor(data)
        if self.bn is not None:
            y = T.batchnorm1d(y, self.bn, train_mode)
        if self.activation == "relu":
            y = T.relu(y)
        return y


class PrunedPool:
    def __init__(self, name, window, stride, activation, t_out):
        self.name = name
        self.window = window
        self.stride = stride
        self.activation = activation
        self.t_out = t_out

    def forward(self, x: T.Tensor, train_mode: bool = False) -> T.Tensor:
        y = T.avgpool1d(x, self.window, self.stride)
        if self.activation == "relu":
            y = T.relu(y)
        return y


@dataclass
class PrunedBlock:
    name: str
    residual: str
    units: list
    skip: Optional[PrunedConv]
    passthrough: bool
    width: int
    main_pos: Optional[list[int]]
    in_pos: Optional[list[int]]
    live_out: list[int]  # seed-space indices, for alignment checks


class PrunedModel:
    def __init__(self, blocks, head_w, head_b, input_channels, input_length,
                 n_out):
        self.blocks = blocks
        self.head_w = head_w
        self.head_b = head_b
        self.input_channels = input_channels
        self.input_length = input_length
        self.n_out = n_out

    def forward(self, x, train_mode: bool = False) -> T.Tensor:
        h = self._features(x, train_mode)
        return T.linear(T.flatten2d(h), self.head_w, self.head_b)

    def _features(self, x, train_mode: bool = False,
                  trace: Optional[list] = None) -> T.Tensor:
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x))
        h = x
        for block in self.blocks:
            h = self._block_forward(block, h, train_mode)
            if trace is not None:
                trace.append(h.data)
        return h

    def _block_forward(self, block: PrunedBlock, x: T.Tensor,
                       train_mode: bool) -> T.Tensor:
        if block.passthrough:
            return x
        h = x
        for unit in block.units:
            h = unit.forward(h, train_mode)
        if block.residual == "identity":
            if block.main_pos == block.in_pos == list(range(block.width)):
                return T.add(h, x)
            return T.add(T.embed_channels(h, block.main_pos, block.width),
                         T.embed_channels(x, block.in_pos, block.width))
        if block.residual == "pointwise":
            return T.add(h, block.skip.forward(x, train_mode))
        return h


def _slice_bn(src, kept):
    if src is None:
        return None
    bn = T.BatchNormState(len(kept), momentum=src.momentum, eps=src.eps)
    bn.scale.data[:] = src.scale.data[kept]
    bn.shift.data[:] = src.shift.data[kept]
    bn.running_mean[:] = src.running_mean[kept]
    bn.running_var[:] = src.running_var[kept]
    return bn


def _arch_signature(arch: EffectiveArch):
    return [(la.name, la.kept_channels, la.kept_taps, la.dilation,
             la.eliminated) for la in arch.layers]


def materialize(model: NasModel, arch: EffectiveArch) -> PrunedModel:
    """Standalone pruned model with weights sliced from the masked seed."""
    plans = _plan(model)
    current = extract(model)
    if _arch_signature(current) != _arch_signature(arch):
        raise ValueError("arch does not match the model's current mask state")
    blocks = []
    for plan in plans:
        units = []
        if not plan.passthrough:
            for p in plan.units:
                src = p.unit
                if p.eliminated:
                    continue
                if p.is_pool:
                    units.append(PrunedPool(src.name, src.spec.f_seed,
                                            src.spec.stride,
                                            src.spec.activation, src.t_out))
                    continue
                bn = _slice_bn(src.bn, p.kept_out)
                if p.generator:
                    units.append(PrunedGenerator(
                        src.name, src.b.data[p.kept_out].copy(), bn,
                        src.spec.activation, src.t_out))
                    continue
                w = src.w.data[p.kept_out][:, p.kept_in][:, :, p.kept_taps]
                units.append(PrunedConv(src.name, w.copy(),
                                        src.b.data[p.kept_out].copy(), bn,
                                        src.spec.stride, p.d,
                                        src.spec.activation, src.t_out))
        skip = None
        if plan.skip is not None:
            p = plan.skip
            src = p.unit
            w = src.w.data[p.kept_out][:, p.kept_in][:, :, [0]]
            skip = PrunedConv(src.name, w.copy(), src.b.data[p.kept_out].copy(),
                              _slice_bn(src.bn, p.kept_out), src.spec.stride,
                              1, src.spec.activation, src.t_out)
        blocks.append(PrunedBlock(plan.name, plan.block.spec.residual, units,
                                  skip, plan.passthrough, len(plan.live_out),
                                  plan.main_pos, plan.in_pos, plan.live_out))
    live_final = plans[-1].live_out
    t_final = model.blocks[-1].t_out
    cols = [c * t_final + j for c in live_final for j in range(t_final)]
    head_w = T.Tensor(model.head_w.data[:, cols].copy())
    head_b = T.Tensor(model.head_b.data.copy())
    return PrunedModel(blocks, head_w, head_b, model.spec.input_channels,
                       model.spec.input_length, model.spec.task_head.n_out)


def describe(pruned: PrunedModel) -> EffectiveArch:
    """EffectiveArch of an already-materialized model (channels renumbered)."""
    layers = []
    weights = biases = macs = 0
    width = pruned.input_channels
    for block in pruned.blocks:
        w_in = width
        for unit in block.units:
            if isinstance(unit, PrunedPool):
                continue
            c_in = 0 if isinstance(unit, PrunedGenerator) else unit.w.shape[1]
            c_out = unit.b.shape[0]
            k = 1 if isinstance(unit, PrunedGenerator) else unit.w.shape[2]
            d = 1 if isinstance(unit, PrunedGenerator) else unit.dilation
            f = 1 if isinstance(unit, PrunedGenerator) else d * (k - 1) + 1
            layers.append(LayerArch(unit.name, list(range(c_out)),
                                    list(range(c_in)),
                                    list(range(0, f, d)) if f else [0],
                                    d, f, k, False))
            weights += c_in * c_out * k
            biases += c_out
            macs += c_in * c_out * k * unit.t_out
        if block.skip is not None:
            s = block.skip
            layers.append(LayerArch(s.name, list(range(s.w.shape[0])),
                                    list(range(s.w.shape[1])), [0], 1, 1, 1,
                                    False))
            weights += s.w.size
            biases += s.b.shape[0]
            macs += s.w.size * s.t_out
        width = block.width if not block.passthrough else width
    head_w = pruned.head_w.size
    weights += head_w
    biases += pruned.head_b.size
    macs += head_w
    return EffectiveArch(layers, weights, weights + biases, macs)


def count(model) -> tuple[int, int, int]:
    """(weights, weights + biases, MACs) over all layers including the head.

    For a NasModel this is the full seed (masks ignored); extract/materialize
    report the pruned counts. Batchnorm parameters are excluded throughout:
    the cost model covers weight tensors, and affine batchnorm folds into
    them at deployment.
    """
    if isinstance(model, PrunedModel):
        a = describe(model)
        return a.params_weights_only, a.params_with_bias, a.macs
    weights = biases = macs = 0
    for unit in model.iter_units():
        if isinstance(unit, PoolUnit):
            continue
        w = unit.c_in * unit.spec.c_out_seed * unit.spec.f_seed
        weights += w
        biases += unit.spec.c_out_seed
        macs += w * unit.t_out
    flat = unit_flat_in(model)
    weights += flat * model.spec.task_head.n_out
    biases += model.spec.task_head.n_out
    macs += flat * model.spec.task_head.n_out
    return weights, weights + biases, macs


def unit_flat_in(model: NasModel) -> int:
    last = model.blocks[-1]
    return last.c_out * last.t_out


# ------------------------------------------------------------ verification


@dataclass
class VerifyReport:
    ok: bool
    trials: int
    tol: float
    max_abs_diff: float
    worst_trial: int
    offending_block: Optional[str] = None


def verify_equivalence(masked_model: NasModel, pruned: PrunedModel,
                       trials: int = 100, tol: float = 1e-5,
                       rng_seed: int = 0) -> VerifyReport:
    """Compare eval-mode outputs on `trials` random inputs."""
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((trials, masked_model.spec.input_channels,
                             masked_model.spec.input_length)).astype(np.float32)
    y_masked = masked_model.forward(x, train_mode=False, masked=True).data
    y_pruned = pruned.forward(x).data
    per_trial = np.abs(y_masked - y_pruned).reshape(trials, -1).max(axis=1)
    worst = int(per_trial.argmax())
    max_diff = float(per_trial[worst])
    if max_diff <= tol:
        return VerifyReport(True, trials, tol, max_diff, worst)
    offending = _localize(masked_model, pruned, x[worst:worst + 1], tol)
    return VerifyReport(False, trials, tol, max_diff, worst, offending)


def _localize(masked_model: NasModel, pruned: PrunedModel, x: np.ndarray,
              tol: float) -> str:
    """First block whose outputs diverge (aligned on the kept channel sets)."""
    trace: list[np.ndarray] = []
    pruned._features(x, trace=trace)
    h = T.Tensor(x)
    for block, pblock, p_out in zip(masked_model.blocks, pruned.blocks, trace):
        block_in = h
        for unit in block.units:
            h = unit.forward(h, False, True, (0, 0, 0))
        if block.spec.residual == "identity":
            h = T.add(h, block_in)
        elif block.spec.residual == "pointwise":
            h = T.add(h, block.skip.forward(block_in, False, True, (0, 0, 0)))
        masked_live = h.data[:, pblock.live_out, :]
        if np.abs(masked_live - p_out).max() > tol:
            return pblock.name
    return "head"


# ------------------------------------------------------------ enumeration


def formula_size(spec: NetworkSpec) -> float:
    """Product estimate of the search-space size over searchable conv layers:
    C_out_seed * F_seed * ceil(log2 F_seed) per layer (channel count alone
    when F_seed is 1)."""
    total = 1.0
    for block in spec.blocks:
        for layer in block.layers:
            if layer.kind == "avgpool" or not layer.searchable:
                continue
            if layer.f_seed == 1:
                total *= layer.c_out_seed
            else:
                total *= (layer.c_out_seed * layer.f_seed
                          * math.ceil(math.log2(layer.f_seed)))
    return total


def _fd_options(f_seed: int) -> list[tuple[int, int]]:
    """Distinct (F, d) pairs reachable by the tap and dilation masks."""
    options = [(1, 1)]
    if f_seed == 1:
        return options
    z = 0
    while 2 ** z <= f_seed - 1:
        d = 2 ** z
        options += [(j * d + 1, d) for j in range(1, (f_seed - 1) // d + 1)]
        z += 1
    return options


@dataclass
class EnumerationReport:
    count: int
    formula: float
    ratio: float
    archs: Iterator[EffectiveArch]


def enumerate_search_space(spec: NetworkSpec, cap: int = 10 ** 6) -> EnumerationReport:
    """Exhaustive distinct (channel count, F, d) architectures of a spec.

    Tied pointwise skips follow the main path's channel choice and add no
    factor. Rejects specs whose exact count exceeds `cap` before iterating.
    """
    model = build(spec, rng_seed=0)
    searchable = []
    count = 1
    for block in model.blocks:
        for unit in block.units:
            if isinstance(unit, PoolUnit) or unit.mask is None:
                continue
            opts = [(c, f, d) for c in range(1, unit.spec.c_out_seed + 1)
                    for f, d in _fd_options(unit.spec.f_seed)]
            searchable.append((unit, opts))
            count *= len(opts)
    if count > cap:
        raise ValueError(f"search space holds {count} architectures, "
                         f"over the cap of {cap}")
    formula = formula_size(spec)

    def _iter():
        for combo in itertools.product(*[opts for _, opts in searchable]):
            choice = {unit.name: c for (unit, _), c in zip(searchable, combo)}
            yield _arch_from_choice(model, choice)

    return EnumerationReport(count, formula, formula / count, _iter())


def _arch_from_choice(model: NasModel, choice: dict) -> EffectiveArch:
    layers = []
    weights = biases = macs = 0
    c_in = model.spec.input_channels
    for block in model.blocks:
        block_in = c_in
        for unit in block.units:
            if isinstance(unit, PoolUnit):
                continue
            if unit.mask is None:
                w = c_in * unit.spec.c_out_seed * unit.spec.f_seed
                weights += w
                biases += unit.spec.c_out_seed
                macs += w * unit.t_out
                c_in = unit.spec.c_out_seed
                continue
            c, f, d = choice[unit.name]
            k = (f - 1) // d + 1
            layers.append(LayerArch(unit.name, list(range(c)),
                                    list(range(c_in)), list(range(0, f, d)),
                                    d, f, k, False))
            w = c_in * c * k
            weights += w
            biases += c
            macs += w * unit.t_out
            c_in = c
        if block.skip is not None:
            c = c_in if block.skip.mask is not None else block.skip.spec.c_out_seed
            layers.append(LayerArch(block.skip.name, list(range(c)),
                                    list(range(block_in)), [0], 1, 1, 1, False))
            w = block_in * c
            weights += w
            biases += c
            macs += w * block.skip.t_out
    t_final = model.blocks[-1].t_out
    head_w = c_in * t_final * model.spec.task_head.n_out
    weights += head_w
    biases += model.spec.task_head.n_out
    macs += head_w
    return EffectiveArch(layers, weights, weights + biases, macs)


# ------------------------------------------------------------ serialization


def arch_to_config(arch: EffectiveArch) -> str:
    """EffectiveArch in the run-config key=value section format."""
    lines = []
    for la in arch.layers:
        lines.append(f"[arch.{la.name}]")
        lines.append(f"eliminated = {str(la.eliminated).lower()}")
        if not la.eliminated:
            lines.append(f"c_out = {len(la.kept_channels)}")
            lines.append("kept_channels = " + ",".join(map(str, la.kept_channels)))
            lines.append(f"f = {la.receptive_field}")
            lines.append(f"d = {la.dilation}")
            lines.append(f"k = {la.kernel_size}")
        lines.append("")
    lines.append("[arch.totals]")
    lines.append(f"params_weights_only = {arch.params_weights_only}")
    lines.append(f"params_with_bias = {arch.params_with_bias}")
    lines.append(f"macs = {arch.macs}")
    return "\n".join(lines) + "\n"


def summary_table(arch: EffectiveArch) -> str:
    rows = [f"{'layer':24s} {'c_out':>5s} {'F':>4s} {'d':>3s} {'K':>4s}"]
    for la in arch.layers:
        if la.eliminated:
            rows.append(f"{la.name:24s} {'-':>5s} {'-':>4s} {'-':>3s} {'-':>4s}  eliminated")
        else:
            rows.append(f"{la.name:24s} {len(la.kept_channels):5d} "
                        f"{la.receptive_field:4d} {la.dilation:3d} "
                        f"{la.kernel_size:4d}")
    rows.append(f"weights {arch.params_weights_only}  "
                f"with biases {arch.params_with_bias}  macs {arch.macs}")
    return "\n".join(rows)
