"""Trainable binary masks over channels, receptive field, and dilation.

Three mask families per searchable conv layer, all built from absolute
values of trainable vectors and binarized with a straight-through
Heaviside at 0.5:

  theta_a = H(|alpha|)                  one entry per output channel
  theta_b = H(C_beta |beta|)            one entry per kernel tap, prefix-shaped
  theta_g = H(C_gamma |gamma|)          one entry per tap, dilation-shaped

C_beta aggregates |beta| as suffix sums, so taps are always pruned from the
far (oldest) end first. C_gamma routes suffix sums of |gamma| through k_map
so that each zeroed suffix doubles the dilation while keeping tap 0 alive.
beta[0] and gamma[0] are frozen at 1 and never reach the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, abs_, add_const, heaviside_ste, matvec, mul,
                     scale_out_channels, scale_taps)


def gamma_length(f_seed: int) -> int:
    """Number of dilation mask entries: ceil(log2 F_seed); 0 when F_seed = 1."""
    if f_seed < 1:
        raise ValueError(f"F_seed must be >= 1, got {f_seed}")
    return 0 if f_seed == 1 else math.ceil(math.log2(f_seed))


def build_c_beta(f_seed: int) -> np.ndarray:
    """Upper-triangular ones: row i sums |beta_q| for q >= i."""
    if f_seed < 1:
        raise ValueError(f"F_seed must be >= 1, got {f_seed}")
    return np.triu(np.ones((f_seed, f_seed), dtype=np.float32))


def build_k_map(f_seed: int) -> tuple[list[int], int]:
    """Tap -> gamma-suffix index map.

    k_map[i] counts, over p = 1 .. len_gamma-1, the moduli 2^p that do not
    divide i. Tap 0 (and any tap divisible by every power) maps to suffix 0;
    odd taps map to the last suffix, so they are the first to go when the
    dilation grows.
    """
    if f_seed < 2:
        raise ValueError(f"k_map needs F_seed >= 2, got {f_seed}")
    len_gamma = gamma_length(f_seed)
    k_map = []
    for i in range(f_seed):
        k = sum(1 for p in range(1, len_gamma) if i % (2 ** p) != 0)
        k_map.append(k)
    return k_map, len_gamma


def build_c_gamma(f_seed: int) -> np.ndarray:
    """Row i has ones in columns k_map[i] .. len_gamma-1."""
    k_map, len_gamma = build_k_map(f_seed)
    c = np.zeros((f_seed, len_gamma), dtype=np.float32)
    for i, k in enumerate(k_map):
        c[i, k:] = 1.0
    return c


@dataclass
class MaskSet:
    """Trainable mask parameters for one layer plus its constant transforms.

    alpha has one entry per seed output channel. beta_free / gamma_free hold
    the trainable tails; the frozen leading 1 of each vector lives in the
    constant column-0 contribution of c_beta / c_gamma.
    """

    c_out_seed: int
    f_seed: int
    len_gamma: int
    alpha: Tensor
    beta_free: Tensor
    gamma_free: Tensor
    c_beta: np.ndarray
    c_gamma: np.ndarray
    k_map: list[int] = field(default_factory=list)

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([[1.0], self.beta_free.data])

    @property
    def gamma(self) -> np.ndarray:
        if self.len_gamma == 0:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([[1.0], self.gamma_free.data])

    def trainables(self) -> list[Tensor]:
        out = [self.alpha]
        if self.beta_free.size:
            out.append(self.beta_free)
        if self.gamma_free.size:
            out.append(self.gamma_free)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"alpha": self.alpha.data, "beta_free": self.beta_free.data,
                "gamma_free": self.gamma_free.data}


def make_mask_set(c_out_seed: int, f_seed: int, dtype=np.float32) -> MaskSet:
    """MaskSet at the seed state: every parameter 1, every mask active."""
    if c_out_seed < 1:
        raise ValueError(f"C_out_seed must be >= 1, got {c_out_seed}")
    len_gamma = gamma_length(f_seed)
    if f_seed == 1:
        k_map, c_gamma = [0], np.zeros((1, 0), dtype=np.float32)
    else:
        k_map, _ = build_k_map(f_seed)
        c_gamma = build_c_gamma(f_seed)
    return MaskSet(
        c_out_seed=c_out_seed,
        f_seed=f_seed,
        len_gamma=len_gamma,
        alpha=Tensor(np.ones(c_out_seed, dtype=dtype), requires_grad=True),
        beta_free=Tensor(np.ones(max(f_seed - 1, 0), dtype=dtype), requires_grad=True),
        gamma_free=Tensor(np.ones(max(len_gamma - 1, 0), dtype=dtype), requires_grad=True),
        c_beta=build_c_beta(f_seed),
        c_gamma=c_gamma,
        k_map=k_map,
    )


@dataclass
class MaskOutputs:
    theta_a_soft: Tensor
    theta_b_soft: Tensor
    theta_gamma_soft: Tensor
    theta_a_bin: Tensor
    theta_b_bin: Tensor
    theta_gamma_bin: Tensor


def compute_masks(m: MaskSet, force_keep_channel: bool = False) -> MaskOutputs:
    """Soft masks from |alpha|, |beta|, |gamma|; hard masks via the 0.5 step.

    With force_keep_channel, an all-zero channel mask keeps the channel of
    largest |alpha| (ties: lowest index) so a skip-less layer never vanishes.
    """
    dtype = m.alpha.dtype
    theta_a_soft = abs_(m.alpha)
    if m.f_seed == 1:
        one = Tensor(np.ones(1, dtype=dtype))
        theta_b_soft = theta_b_bin = one
        theta_gamma_soft = theta_gamma_bin = one
    else:
        theta_b_soft = add_const(matvec(m.c_beta[:, 1:], abs_(m.beta_free)),
                                 m.c_beta[:, 0])
        theta_gamma_soft = add_const(matvec(m.c_gamma[:, 1:], abs_(m.gamma_free)),
                                     m.c_gamma[:, 0])
        theta_b_bin = heaviside_ste(theta_b_soft)
        theta_gamma_bin = heaviside_ste(theta_gamma_soft)
    theta_a_bin = heaviside_ste(theta_a_soft)
    if force_keep_channel and not theta_a_bin.data.any():
        keep = np.zeros(m.c_out_seed, dtype=dtype)
        keep[int(np.argmax(np.abs(m.alpha.data)))] = 1.0
        theta_a_bin = add_const(theta_a_bin, keep)
    return MaskOutputs(theta_a_soft, theta_b_soft, theta_gamma_soft,
                       theta_a_bin, theta_b_bin, theta_gamma_bin)


def apply_masks(w: Tensor, out: MaskOutputs) -> Tensor:
    """Hadamard-mask a seed kernel w[C_out, C_in, F_seed] with the hard masks."""
    tap = mul(out.theta_b_bin, out.theta_gamma_bin)
    return scale_taps(scale_out_channels(w, out.theta_a_bin), tap)
