"""Differentiable size and operation-count estimates from the soft masks.

Every searchable layer contributes C_in_eff * C_out_eff * K_eff weights,
where the effective counts are sums of pre-binarization mask magnitudes:

  C_out_eff = sum_i |alpha_i|
  K_eff     = sum_i (theta_b_soft[i] / (F_seed - i))
                  * (theta_g_soft[i] / (len_gamma - k_map[i]))

The denominators are each term's value at the all-ones seed state, so at
initialization K_eff == F_seed and the totals match the integer weight and
MAC counts of the searchable layers exactly. The ratios are computed with
a division op rather than reciprocal multiplies to keep x/x == 1 exact in
float32. C_in_eff chains along the topology: the previous searchable
layer's C_out_eff, or the constant channel count of the input or of a
fixed layer. Pointwise residual convs contribute with K_eff = 1 and the
block input as C_in_eff; their channel mask is the tied alpha, so pruning
pressure on a block output reaches both ends of the add.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masks import compute_masks
from .model import NasModel, PoolUnit


def c_out_eff(unit) -> T.Tensor:
    """Soft output-channel count of a searchable layer."""
    if unit.mask is None:
        raise ValueError(f"{unit.name} is not searchable")
    return T.sum_(T.abs_(unit.mask.alpha))


def k_eff(unit) -> T.Tensor:
    """Soft kernel-size estimate of a searchable conv layer."""
    m = unit.mask
    if m is None:
        raise ValueError(f"{unit.name} is not searchable")
    if m.f_seed == 1:
        return T.Tensor(np.ones((), dtype=m.alpha.dtype))
    outs = compute_masks(m)
    dtype = outs.theta_b_soft.dtype
    den_b = (m.f_seed - np.arange(m.f_seed)).astype(dtype)
    den_g = (m.len_gamma - np.asarray(m.k_map)).astype(dtype)
    ratio = T.mul(T.cdiv(outs.theta_b_soft, den_b),
                  T.cdiv(outs.theta_gamma_soft, den_g))
    return T.sum_(ratio)


@dataclass
class LayerCostRow:
    name: str
    c_in_eff: float
    c_out_eff: float
    k_eff: float
    t_out: int
    size: float
    ops: float


@dataclass
class CostBreakdown:
    rows: list[LayerCostRow]
    r_size: T.Tensor
    r_ops: T.Tensor


def _mul(a, b):
    if isinstance(a, T.Tensor) and isinstance(b, T.Tensor):
        return T.mul(a, b)
    if isinstance(a, T.Tensor):
        return T.cmul(a, float(b))
    return T.cmul(b, float(a))


def _acc(total, term):
    return term if total is None else T.add(total, term)


def _value(x) -> float:
    return float(x.data) if isinstance(x, T.Tensor) else float(x)


def cost_breakdown(model: NasModel) -> CostBreakdown:
    """Per-layer soft costs plus the r_size / r_ops totals, one traversal."""
    rows: list[LayerCostRow] = []
    size_total = ops_total = None
    in_eff = float(model.spec.input_channels)
    for block in model.blocks:
        block_in = in_eff
        for unit in block.units:
            if isinstance(unit, PoolUnit):
                continue  # no weights; channels pass through
            if unit.mask is None:
                in_eff = float(unit.spec.c_out_seed)
                continue  # fixed layer, not part of the searched cost
            co, ke = c_out_eff(unit), k_eff(unit)
            term = _mul(_mul(in_eff, co), ke)
            size_total = _acc(size_total, term)
            ops_total = _acc(ops_total, T.cmul(term, float(unit.t_out)))
            rows.append(LayerCostRow(unit.name, _value(in_eff), _value(co),
                                     _value(ke), unit.t_out, _value(term),
                                     _value(term) * unit.t_out))
            in_eff = co
        skip = block.skip
        if skip is not None and skip.mask is not None:
            co = c_out_eff(skip)
            term = _mul(block_in, co)
            size_total = _acc(size_total, term)
            ops_total = _acc(ops_total, T.cmul(term, float(skip.t_out)))
            rows.append(LayerCostRow(skip.name, _value(block_in), _value(co),
                                     1.0, skip.t_out, _value(term),
                                     _value(term) * skip.t_out))
    if size_total is None:
        size_total = T.Tensor(np.zeros(()))
        ops_total = T.Tensor(np.zeros(()))
    return CostBreakdown(rows, size_total, ops_total)


def r_size(model: NasModel) -> T.Tensor:
    return cost_breakdown(model).r_size


def r_ops(model: NasModel) -> T.Tensor:
    return cost_breakdown(model).r_ops


def seed_cost(model: NasModel, kind: str = "size") -> float:
    """Integer cost of the searchable layers at the seed state. 1/seed_cost
    is the usual starting point for the regularization strength."""
    if kind not in ("size", "ops"):
        raise ValueError(f"unknown cost kind {kind!r}")
    total = 0
    for unit in model.iter_units():
        if getattr(unit, "mask", None) is None:
            continue
        w = unit.c_in * unit.spec.c_out_seed * unit.spec.f_seed
        total += w * (unit.t_out if kind == "ops" else 1)
    return float(total)


def total_loss(task_loss: T.Tensor, model: NasModel, lam: float,
               kind: str) -> tuple[T.Tensor, dict]:
    """task_loss + lam * regularizer, with both term values for logging."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if kind not in ("size", "ops"):
        raise ValueError(f"unknown cost kind {kind!r}")
    bd = cost_breakdown(model)
    reg = bd.r_size if kind == "size" else bd.r_ops
    parts = {"task": float(task_loss.data), "reg": float(reg.data),
             "lambda": lam, "reg_kind": kind,
             "reg_weighted": lam * float(reg.data)}
    if lam == 0.0:
        return task_loss, parts  # no pruning pressure, masks get no gradient
    return T.add(task_loss, T.cmul(reg, lam)), parts
