"""Differentiable layers the network is assembled from."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import InitScheme, ParamStore, init_array


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    kind: str = "fan_in_normal"
    fan_in: int | None = None
    gain: float = 2.0


class Scope(Mapping[str, Tensor]):
    """Read-only view of the entries of a parameter mapping under ``prefix.``."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str):
        self._params = params
        self._prefix = prefix + "." if prefix else ""

    def __getitem__(self, key: str) -> Tensor:
        return self._params[self._prefix + key]

    def __iter__(self) -> Iterator[str]:
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def __contains__(self, key) -> bool:
        return (self._prefix + key) in self._params


def scope(params: Mapping[str, Tensor], prefix: str) -> Scope:
    return Scope(params, prefix)


def prefixed(prefix: str, specs: Mapping[str, ParamSpec]) -> dict[str, ParamSpec]:
    return {f"{prefix}.{k}": v for k, v in specs.items()}


def materialize(specs: Mapping[str, ParamSpec], seed: int, dtype=np.float32) -> ParamStore:
    """Initialize every declared parameter; each draws from its own (seed, name) stream."""
    store = ParamStore()
    for name, spec in specs.items():
        scheme = InitScheme(spec.kind, seed, spec.gain)
        store[name] = init_array(name, spec.shape, scheme, spec.fan_in, dtype)
    return store


# ---------------------------------------------------------------------------
# convolution

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)

    def param_specs(self, gain: float = 2.0) -> dict[str, ParamSpec]:
        specs = {"w": ParamSpec((self.out_channels, self.in_channels, self.kernel, self.kernel),
                                gain=gain)}
        if self.has_bias:
            specs["b"] = ParamSpec((self.out_channels,), kind="zeros")
        return specs

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def conv2d(x: Tensor, spec: ConvSpec, params: Mapping[str, Tensor]) -> Tensor:
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {x.shape[0]}")
    b = params["b"] if spec.has_bias else None
    return ad.conv2d(x, params["w"], b, stride=spec.stride, padding=spec.padding)


def conv_relu(x: Tensor, spec: ConvSpec, params: Mapping[str, Tensor]) -> Tensor:
    return ad.relu(conv2d(x, spec, params))


# ---------------------------------------------------------------------------
# fully-connected mixing along one of the first two axes of an (A, B, C) tensor

def fc_axis(x: Tensor, axis: int, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 3 or axis not in (0, 1):
        raise ShapeError(f"fc_axis mixes axis 0 or 1 of a 3-d tensor, got axis={axis}, shape={x.shape}")
    n = x.shape[axis]
    if weight.shape != (n, n) or (bias is not None and bias.shape != (n,)):
        raise ShapeError(f"fc_axis along axis {axis} of extent {n} needs a {n}x{n} weight "
                         f"and ({n},) bias, got {weight.shape}"
                         f"{'' if bias is None else f', {bias.shape}'}")
    wd = weight.data
    if axis == 0:
        out = np.tensordot(wd, x.data, axes=(1, 0))
        if bias is not None:
            out += bias.data[:, None, None]
    else:
        out = np.einsum("ij,ajc->aic", wd, x.data, optimize=True)
        if bias is not None:
            out += bias.data[None, :, None]
    bias_axes = (1, 2) if axis == 0 else (0, 2)

    def bw(g):
        if axis == 0:
            gx = np.tensordot(wd.T, g, axes=(1, 0)) if x.requires_grad else None
            gw = np.tensordot(g, x.data, axes=((1, 2), (1, 2))) if weight.requires_grad else None
        else:
            gx = np.einsum("ji,ajc->aic", wd, g, optimize=True) if x.requires_grad else None
            gw = np.einsum("aic,ajc->ij", g, x.data, optimize=True) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=bias_axes)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return ad.record(out, parents, bw, "fc_axis")


# ---------------------------------------------------------------------------
# activations, resampling, channel plumbing

relu = ad.relu
sigmoid = ad.sigmoid


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    return ad.resize_bilinear(x, tuple(size))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    spatial = {t.shape[1:] for t in xs}
    if len(spatial) != 1:
        raise ShapeError(f"concat_channels needs matching spatial sizes, got {sorted(spatial)}")
    return ad.concat(xs, axis=0)


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    c = x.shape[0]
    if not 1 <= at < c:
        raise ShapeError(f"split index {at} outside [1, {c})")
    return ad.take(x, 0, 0, at), ad.take(x, 0, at, c)
