"""Seed network construction and masked forward evaluation.

A network is declared as blocks of layers (conv1d / fc / avgpool) plus a
flatten->linear task head. Every searchable conv or fc layer carries a
MaskSet; the forward pass recomputes the binary masks each call, applies
them to the kernel, the bias, and (when batchnorm is present) the layer
output, and always runs the convolution at dilation 1. Masked taps and
the mask-aware cost terms are what emulate larger dilations.

Residual blocks: 'identity' adds the block input unchanged, 'pointwise'
routes it through a kernel-size-1 conv whose channel mask is tied to the
last conv of the block (same alpha object), so both ends of the add always
agree on which channels are alive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .masks import MaskOutputs, MaskSet, apply_masks, compute_masks, make_mask_set

LAYER_KINDS = ("conv1d", "fc", "avgpool")
ACTIVATIONS = ("relu", "none")
RESIDUALS = ("none", "identity", "pointwise")
HEAD_KINDS = ("classification", "regression")


@dataclass
class LayerSpec:
    kind: str = "conv1d"
    c_out_seed: int = 1
    f_seed: int = 1
    stride: int = 1
    has_batchnorm: bool = False
    activation: str = "none"
    dropout_rate: float = 0.0
    searchable: bool = True

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.f_seed < 1:
            raise ValueError(f"f_seed must be >= 1, got {self.f_seed}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kind == "fc" and (self.f_seed != 1 or self.stride != 1):
            raise ValueError("fc layers require f_seed = 1 and stride = 1")
        if self.kind == "avgpool":
            # pooling reshapes time only; nothing about it is trainable
            self.searchable = False
        elif self.c_out_seed < 1:
            raise ValueError(f"c_out_seed must be >= 1, got {self.c_out_seed}")


@dataclass
class BlockSpec:
    layers: list[LayerSpec]
    residual: str = "none"

    def __post_init__(self) -> None:
        if self.residual not in RESIDUALS:
            raise ValueError(f"unknown residual kind {self.residual!r}")
        if not self.layers:
            raise ValueError("block needs at least one layer")


@dataclass
class TaskHead:
    kind: str = "classification"
    n_out: int = 2

    def __post_init__(self) -> None:
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.n_out < 1:
            raise ValueError(f"n_out must be >= 1, got {self.n_out}")


@dataclass
class NetworkSpec:
    input_channels: int
    input_length: int
    blocks: list[BlockSpec]
    task_head: TaskHead

    def __post_init__(self) -> None:
        if self.input_channels < 1 or self.input_length < 1:
            raise ValueError("input_channels and input_length must be >= 1")
        if not self.blocks:
            raise ValueError("network needs at least one block")


@dataclass
class ShapeRow:
    name: str
    kind: str
    c_in: int
    c_out: int
    t_in: int
    t_out: int
    searchable: bool


class ConvUnit:
    """One conv/fc layer at runtime: weights, optional batchnorm, optional mask."""

    def __init__(self, spec: LayerSpec, name: str, index: int, c_in: int,
                 t_in: int, rng: np.random.Generator):
        self.spec = spec
        self.name = name
        self.index = index
        self.c_in = c_in
        self.t_in = t_in
        self.t_out = -(-t_in // spec.stride)
        fan_in = c_in * spec.f_seed
        self.w = T.Tensor(T.kaiming_uniform((spec.c_out_seed, c_in, spec.f_seed),
                                            fan_in, rng), requires_grad=True,
                          name=f"{name}.weight")
        bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
        self.b = T.Tensor(rng.uniform(-bound, bound,
                                      size=spec.c_out_seed).astype(np.float32),
                          requires_grad=True, name=f"{name}.bias")
        self.bn = T.BatchNormState(spec.c_out_seed) if spec.has_batchnorm else None
        self.mask: Optional[MaskSet] = (
            make_mask_set(spec.c_out_seed, spec.f_seed) if spec.searchable else None)
        self.force_keep = False  # set by the builder once topology is known
        self.last_out_shape: Optional[tuple] = None

    def forward(self, x: T.Tensor, train_mode: bool, masked: bool,
                dropout_key: tuple[int, int, int]) -> T.Tensor:
        mouts: Optional[MaskOutputs] = None
        w, b = self.w, self.b
        if masked and self.mask is not None:
            mouts = compute_masks(self.mask, self.force_keep)
            w = apply_masks(w, mouts)
            b = T.mul(b, mouts.theta_a_bin)
        y = T.conv1d(x, w, b, stride=self.spec.stride, dilation=1)
        if self.bn is not None:
            y = T.batchnorm1d(y, self.bn, train_mode)
            if mouts is not None:
                # batchnorm re-centers dead channels; kill them again so a
                # pruned channel is exactly zero downstream
                y = T.scale_channels(y, mouts.theta_a_bin)
        if self.spec.activation == "relu":
            y = T.relu(y)
        if train_mode and self.spec.dropout_rate > 0.0:
            rng = np.random.Generator(np.random.Philox(
                seed=[dropout_key[0], dropout_key[1], dropout_key[2], self.index]))
            y = T.dropout(y, self.spec.dropout_rate, rng)
        self.last_out_shape = y.shape
        return y

    def params(self) -> list[tuple[str, T.Tensor]]:
        out = [(f"{self.name}.weight", self.w), (f"{self.name}.bias", self.b)]
        if self.bn is not None:
            out += [(f"{self.name}.bn_scale", self.bn.scale),
                    (f"{self.name}.bn_shift", self.bn.shift)]
        return out


class PoolUnit:
    def __init__(self, spec: LayerSpec, name: str, index: int, c_in: int, t_in: int):
        if spec.f_seed > t_in:
            raise ValueError(f"{name}: pool window {spec.f_seed} exceeds length {t_in}")
        self.spec = spec
        self.name = name
        self.index = index
        self.c_in = c_in
        self.t_in = t_in
        self.t_out = (t_in - spec.f_seed) // spec.stride + 1
        self.mask = None
        self.last_out_shape: Optional[tuple] = None

    def forward(self, x: T.Tensor, train_mode: bool, masked: bool,
                dropout_key: tuple[int, int, int]) -> T.Tensor:
        y = T.avgpool1d(x, self.spec.f_seed, self.spec.stride)
        if self.spec.activation == "relu":
            y = T.relu(y)
        self.last_out_shape = y.shape
        return y

    def params(self) -> list[tuple[str, T.Tensor]]:
        return []


@dataclass
class BlockRuntime:
    spec: BlockSpec
    units: list
    skip: Optional[ConvUnit]
    c_in: int
    c_out: int
    t_in: int
    t_out: int


class NasModel:
    """A built seed network: runtime units, masks, shape table, task head."""

    def __init__(self, spec: NetworkSpec, blocks: list[BlockRuntime],
                 head_w: T.Tensor, head_b: T.Tensor,
                 shape_table: list[ShapeRow]):
        self.spec = spec
        self.blocks = blocks
        self.head_w = head_w
        self.head_b = head_b
        self.shape_table = shape_table

    def iter_units(self) -> Iterator:
        for block in self.blocks:
            yield from block.units
            if block.skip is not None:
                yield block.skip

    def forward(self, x, train_mode: bool = False, masked: bool = True,
                dropout_key: tuple[int, int, int] = (0, 0, 0)) -> T.Tensor:
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x))
        if x.ndim != 3:
            raise ValueError(f"expected input [batch, channels, time], got {x.shape}")
        if x.shape[1] != self.spec.input_channels or x.shape[2] != self.spec.input_length:
            raise ValueError(f"input shape {x.shape[1:]} does not match spec "
                             f"({self.spec.input_channels}, {self.spec.input_length})")
        h = x
        for block in self.blocks:
            block_in = h
            for unit in block.units:
                h = unit.forward(h, train_mode, masked, dropout_key)
            if block.spec.residual == "identity":
                h = T.add(h, block_in)
            elif block.spec.residual == "pointwise":
                h = T.add(h, block.skip.forward(block_in, train_mode, masked,
                                                dropout_key))
        return T.linear(T.flatten2d(h), self.head_w, self.head_b)

    def named_params(self) -> list[tuple[str, T.Tensor]]:
        """Weight-type parameters (conv/fc/batchnorm/head), no mask parameters."""
        out = []
        for unit in self.iter_units():
            out += unit.params()
        out += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def named_mask_params(self) -> list[tuple[str, T.Tensor]]:
        """Trainable mask parameters; a tied alpha appears once."""
        out, seen = [], set()
        for unit in self.iter_units():
            if unit.mask is None:
                continue
            for label, t in (("alpha", unit.mask.alpha),
                             ("beta_free", unit.mask.beta_free),
                             ("gamma_free", unit.mask.gamma_free)):
                if t.size == 0 or id(t) in seen:
                    continue
                seen.add(id(t))
                out.append((f"{unit.name}.{label}", t))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Everything needed to restore the model: weights, bn stats, masks."""
        state = {name: t.data for name, t in self.named_params()}
        for unit in self.iter_units():
            if getattr(unit, "bn", None) is not None:
                state[f"{unit.name}.bn_rmean"] = unit.bn.running_mean
                state[f"{unit.name}.bn_rvar"] = unit.bn.running_var
        for name, t in self.named_mask_params():
            state[name] = t.data
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        have = self.state_dict()
        missing = sorted(set(have) - set(state))
        extra = sorted(set(state) - set(have))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in have.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src.astype(arr.dtype, copy=False)


def _propagate(spec: NetworkSpec) -> None:
    """Shape-check a NetworkSpec; raises with the offending block/layer index."""
    c, t = spec.input_channels, spec.input_length
    for bi, block in enumerate(spec.blocks):
        c_in, t_in = c, t
        for li, layer in enumerate(block.layers):
            where = f"block {bi} layer {li}"
            if layer.kind == "avgpool":
                if layer.f_seed > t:
                    raise ValueError(f"{where}: pool window {layer.f_seed} "
                                     f"exceeds length {t}")
                t = (t - layer.f_seed) // layer.stride + 1
            else:
                t = -(-t // layer.stride)
                c = layer.c_out_seed
            if t < 1:
                raise ValueError(f"{where}: sequence length collapsed to {t}")
        if block.residual == "identity" and (c, t) != (c_in, t_in):
            raise ValueError(f"block {bi}: identity residual needs matching "
                             f"shapes, got ({c_in},{t_in}) -> ({c},{t})")
        if block.residual == "pointwise":
            s = 1
            for layer in block.layers:
                s *= layer.stride
            if -(-t_in // s) != t:
                raise ValueError(f"block {bi}: pointwise skip (stride {s}) "
                                 f"cannot match output length {t}")


def build(spec: NetworkSpec, rng_seed: int) -> NasModel:
    """Instantiate a NetworkSpec: init weights, attach masks, fill the shape table.

    Initialization is Kaiming-uniform (fan-in) for conv/fc kernels, uniform
    +-1/sqrt(fan_in) for biases, scale 1 / shift 0 for batchnorm. Draw order
    is fixed (blocks in order, layers in order, skip conv last, then head) so
    a seed value pins every weight.
    """
    _propagate(spec)
    rng = np.random.default_rng(rng_seed)
    blocks: list[BlockRuntime] = []
    table: list[ShapeRow] = []
    c, t = spec.input_channels, spec.input_length
    index = 0
    for bi, block_spec in enumerate(spec.blocks):
        c_in, t_in = c, t
        units = []
        for li, layer in enumerate(block_spec.layers):
            name = f"block{bi}.layer{li}"
            if layer.kind == "avgpool":
                unit = PoolUnit(layer, name, index, c, t)
            else:
                unit = ConvUnit(layer, name, index, c, t, rng)
            units.append(unit)
            table.append(ShapeRow(name, layer.kind, c, unit_c_out(unit), t,
                                  unit.t_out, layer.searchable))
            c, t = unit_c_out(unit), unit.t_out
            index += 1
        skip = None
        if block_spec.residual == "pointwise":
            s_total = 1
            for layer in block_spec.layers:
                s_total *= layer.stride
            tied = _last_masked_conv(units)
            skip_spec = LayerSpec(kind="conv1d", c_out_seed=c, f_seed=1,
                                  stride=s_total, searchable=tied is not None)
            skip = ConvUnit(skip_spec, f"block{bi}.skip", index, c_in, t_in, rng)
            index += 1
            if tied is not None:
                skip.mask.alpha = tied.mask.alpha
                # an all-zero tied mask would sever both paths at once
                skip.force_keep = True
                tied.force_keep = True
            table.append(ShapeRow(skip.name, "conv1d", c_in, c, t_in,
                                  skip.t_out, skip_spec.searchable))
        if block_spec.residual == "none":
            for unit in units:
                if unit.mask is not None:
                    unit.force_keep = True
        blocks.append(BlockRuntime(block_spec, units, skip, c_in, c, t_in, t))
    head = spec.task_head
    flat = c * t
    head_w = T.Tensor(T.kaiming_uniform((head.n_out, flat), flat, rng),
                      requires_grad=True, name="head.weight")
    hb = 1.0 / math.sqrt(flat)
    head_b = T.Tensor(rng.uniform(-hb, hb, size=head.n_out).astype(np.float32),
                      requires_grad=True, name="head.bias")
    table.append(ShapeRow("head", "fc", flat, head.n_out, 1, 1, False))
    return NasModel(spec, blocks, head_w, head_b, table)


def unit_c_out(unit) -> int:
    return unit.c_in if isinstance(unit, PoolUnit) else unit.spec.c_out_seed


def _last_masked_conv(units) -> Optional[ConvUnit]:
    # the block's output channels come from its last conv (pools pass
    # channels through); only that conv's mask may drive the skip conv
    for unit in reversed(units):
        if isinstance(unit, PoolUnit):
            continue
        return unit if unit.mask is not None else None
    return None


def spec_to_dict(spec: NetworkSpec) -> dict:
    """Plain-dict form of a NetworkSpec, for JSON sidecars."""
    return {
        "input_channels": spec.input_channels,
        "input_length": spec.input_length,
        "task_head": {"kind": spec.task_head.kind,
                      "n_out": spec.task_head.n_out},
        "blocks": [{
            "residual": b.residual,
            "layers": [{
                "kind": l.kind, "c_out_seed": l.c_out_seed,
                "f_seed": l.f_seed, "stride": l.stride,
                "has_batchnorm": l.has_batchnorm,
                "activation": l.activation,
                "dropout_rate": l.dropout_rate,
                "searchable": l.searchable,
            } for l in b.layers],
        } for b in spec.blocks],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    blocks = [BlockSpec([LayerSpec(**l) for l in b["layers"]], b["residual"])
              for b in d["blocks"]]
    return NetworkSpec(d["input_channels"], d["input_length"], blocks,
                       TaskHead(**d["task_head"]))


def builtin_seed(name: str) -> NetworkSpec:
    """Ready-made seeds. All convs run at dilation 1 with the receptive field
    folded into f_seed, which is what the dilation masks then prune back."""
    if name == "ecg_tcn":
        def cv(c_out, f, drop=0.5):
            return LayerSpec(kind="conv1d", c_out_seed=c_out, f_seed=f,
                             has_batchnorm=True, activation="relu",
                             dropout_rate=drop, searchable=True)
        # channel flow: 1 -> 8 -> (12, 12) -> (16, 16) -> (20, 20)
        blocks = [
            BlockSpec([cv(8, 11, drop=0.0)], residual="none"),
            BlockSpec([cv(12, 11), cv(12, 11)], residual="pointwise"),
            BlockSpec([cv(16, 21), cv(16, 21)], residual="pointwise"),
            BlockSpec([cv(20, 41), cv(20, 41)], residual="pointwise"),
        ]
        return NetworkSpec(1, 140, blocks, TaskHead("classification", 5))
    if name == "synth_small":
        layer = lambda: LayerSpec(kind="conv1d", c_out_seed=16, f_seed=16,
                                  has_batchnorm=True, activation="relu",
                                  searchable=True)
        blocks = [BlockSpec([layer()], residual="none") for _ in range(3)]
        return NetworkSpec(1, 32, blocks, TaskHead("classification", 2))
    raise ValueError(f"unknown builtin seed {name!r}")
