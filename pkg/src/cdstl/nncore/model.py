"""Architectures as explicit layer sequences over a named parameter dict.

Forward passes are functional: ``forward(model, x, params)`` runs the
architecture's layer list against any parameter mapping with the right
names and shapes. This is what lets a trajectory-matching student unroll
SGD steps as plain tensor expressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import torch
import torch.nn.functional as F

from cdstl.errors import ConfigError, DimensionError, UsageError
from cdstl.nncore.rng import Rng

DTYPE = torch.float64
GN_EPS = 1e-5
MAX_GN_GROUPS = 8

CONVNET_S_WIDTH = 32
CONVNET_DEEP_WIDTH = 64
MLP_HIDDEN = 128
DECODER_WIDTH = 32


class Arch(IntEnum):
    CONVNET_S = 0
    CONVNET_DEEP = 1
    MLP = 2
    LINEAR_PROBE = 3
    DECODER = 4

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, value) -> "Arch":
        if isinstance(value, Arch):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for arch, name in _LABELS.items():
            if name.lower() == key:
                return arch
        raise ConfigError(f"unknown architecture {value!r}; expected one of {sorted(_LABELS.values())}")


_LABELS = {
    Arch.CONVNET_S: "ConvNetS",
    Arch.CONVNET_DEEP: "ConvNetDeep",
    Arch.MLP: "MLP",
    Arch.LINEAR_PROBE: "LinearProbe",
    Arch.DECODER: "Decoder",
}


def _conv_blocks(n):
    layers = []
    for i in range(n):
        layers += [
            ("conv", f"block{i}.conv"),
            ("groupnorm", f"block{i}.norm"),
            ("relu", None),
            ("avgpool", None),
        ]
    return layers


def layer_spec(arch: Arch) -> list[tuple[str, str | None]]:
    """Ordered (kind, parameter-prefix) pairs; the last dense layer is the head."""
    if arch == Arch.CONVNET_S:
        return _conv_blocks(2) + [("flatten", None), ("dense", "head")]
    if arch == Arch.CONVNET_DEEP:
        return _conv_blocks(3) + [("flatten", None), ("dense", "head")]
    if arch == Arch.MLP:
        return [
            ("flatten", None),
            ("dense", "hidden0"),
            ("relu", None),
            ("dense", "hidden1"),
            ("relu", None),
            ("dense", "head"),
        ]
    if arch == Arch.LINEAR_PROBE:
        return [("flatten", None), ("dense", "head")]
    if arch == Arch.DECODER:
        return [
            ("flatten", None),
            ("dense", "fc"),
            ("relu", None),
            ("unflatten_square", "up0"),
            ("convT", "up0"),
            ("relu", None),
            ("convT", "up1"),
            ("sigmoid", None),
        ]
    raise ConfigError(f"no layer spec for {arch!r}")


def _pool_depth(arch: Arch) -> int:
    return {Arch.CONVNET_S: 2, Arch.CONVNET_DEEP: 3}.get(arch, 0)


def gn_groups(channels: int) -> int:
    g = min(MAX_GN_GROUPS, channels)
    while channels % g:
        g -= 1
    return g


@dataclass(eq=False)
class Model:
    arch: Arch
    params: dict[str, torch.Tensor]
    num_classes: int | None = None
    in_shape: tuple[int, int, int] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def layers(self):
        return layer_spec(self.arch)

    def parameters(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def requires_grad_(self, flag: bool = True) -> "Model":
        for p in self.params.values():
            p.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "Model":
        params = {k: v.detach().clone().requires_grad_(v.requires_grad) for k, v in self.params.items()}
        return Model(self.arch, params, self.num_classes, self.in_shape, dict(self.meta))


def _kaiming(rng: Rng, shape, fan_in) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return torch.from_numpy(rng.uniform(shape, -bound, bound))


def build_model(arch, in_shape, num_classes: int, seed: int = 0, *, zero: bool = False) -> Model:
    """Construct a fresh model with seeded Kaiming-uniform (fan-in) weights.

    Biases start at zero, group-norm affine at (1, 0). ``zero=True`` zeroes
    every parameter, which is handy for identity checks.
    """
    arch = Arch.parse(arch)
    if arch == Arch.DECODER:
        raise UsageError("decoders are built with cdstl.latentprior.build_decoder")
    c, h, w = in_shape
    depth = _pool_depth(arch)
    if depth and (h % 2**depth or w % 2**depth):
        raise DimensionError(f"{arch.label} needs spatial dims divisible by {2**depth}, got {h}x{w}")
    rng = Rng(seed)
    shapes: list[tuple[str, tuple, int]] = []  # (name, shape, fan_in or 0 for const)

    if arch in (Arch.CONVNET_S, Arch.CONVNET_DEEP):
        width = CONVNET_S_WIDTH if arch == Arch.CONVNET_S else CONVNET_DEEP_WIDTH
        in_ch = c
        for i in range(depth):
            shapes.append((f"block{i}.conv.weight", (width, in_ch, 3, 3), in_ch * 9))
            shapes.append((f"block{i}.conv.bias", (width,), 0))
            shapes.append((f"block{i}.norm.weight", (width,), -1))
            shapes.append((f"block{i}.norm.bias", (width,), 0))
            in_ch = width
        feat = width * (h // 2**depth) * (w // 2**depth)
    elif arch == Arch.MLP:
        feat = c * h * w
        for i in range(2):
            shapes.append((f"hidden{i}.weight", (MLP_HIDDEN, feat), feat))
            shapes.append((f"hidden{i}.bias", (MLP_HIDDEN,), 0))
            feat = MLP_HIDDEN
    else:
        feat = c * h * w
    shapes.append(("head.weight", (num_classes, feat), feat))
    shapes.append(("head.bias", (num_classes,), 0))

    params = {}
    for name, shape, fan_in in shapes:
        if zero:
            t = torch.zeros(shape, dtype=DTYPE)
        elif fan_in > 0:
            t = _kaiming(rng, shape, fan_in)
        elif fan_in < 0:
            t = torch.ones(shape, dtype=DTYPE)
        else:
            t = torch.zeros(shape, dtype=DTYPE)
        params[name] = t.requires_grad_(True)
    return Model(arch, params, num_classes, (c, h, w))


def _apply(kind, prefix, x, params, model):
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "relu":
        # relu'(0) := 0, which is torch's convention as well
        return torch.relu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "avgpool":
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise DimensionError(f"avg-pool needs even spatial dims, got {tuple(x.shape[-2:])}")
        return F.avg_pool2d(x, 2)

    wname, bname = f"{prefix}.weight", f"{prefix}.bias"
    try:
        weight = params[wname]
    except KeyError:
        raise DimensionError(f"layer {prefix!r}: missing parameter {wname!r}") from None
    bias = params.get(bname)

    if kind == "conv":
        if x.dim() != 4 or x.shape[1] != weight.shape[1]:
            raise DimensionError(
                f"layer {prefix!r}: expected input [B,{weight.shape[1]},H,W], got {list(x.shape)}"
            )
        return F.conv2d(x, weight, bias, padding=1)
    if kind == "groupnorm":
        return F.group_norm(x, gn_groups(x.shape[1]), weight, bias, eps=GN_EPS)
    if kind == "dense":
        if x.dim() != 2 or x.shape[1] != weight.shape[1]:
            raise DimensionError(
                f"layer {prefix!r}: expected {weight.shape[1]} input features, got {list(x.shape)}"
            )
        return F.linear(x, weight, bias)
    if kind == "unflatten_square":
        ch = weight.shape[0]
        side = math.isqrt(x.shape[1] // ch)
        if ch * side * side != x.shape[1]:
            raise DimensionError(f"layer {prefix!r}: cannot reshape {x.shape[1]} features to [{ch},s,s]")
        return x.reshape(x.shape[0], ch, side, side)
    if kind == "convT":
        if x.dim() != 4 or x.shape[1] != weight.shape[0]:
            raise DimensionError(
                f"layer {prefix!r}: expected input [B,{weight.shape[0]},h,w], got {list(x.shape)}"
            )
        return F.conv_transpose2d(x, weight, bias, stride=2, padding=1)
    raise ConfigError(f"unknown layer kind {kind!r}")


def run_layers(model: Model, x: torch.Tensor, params=None, *, stop_before_head: bool = False):
    params = model.params if params is None else params
    layers = model.layers
    if stop_before_head:
        if layers[-1][0] != "dense":
            raise UsageError(f"{model.arch.label} has no dense head to embed before")
        layers = layers[:-1]
    for kind, prefix in layers:
        x = _apply(kind, prefix, x, params, model)
    return x


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))
