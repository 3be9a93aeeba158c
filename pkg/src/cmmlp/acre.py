"""Axial context relation encoder: axial self-attention followed by
foreground/background gating with the previous mask."""
from __future__ import annotations

import math
from typing import Mapping

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .nn import ConvSpec, ParamSpec

AXES = ("h", "w")


def _project(weight: Tensor, x: Tensor) -> Tensor:
    return ad.einsum("dc,chw->dhw", weight, x)


def axial_pass(x: Tensor, axis: str, params: Mapping[str, Tensor]) -> Tensor:
    """Single-head self-attention along one spatial axis plus a residual.

    Along ``h`` every column is an independent sequence of H tokens; along
    ``w`` every row is a sequence of W tokens.
    """
    C = x.shape[0]
    q = _project(params["q"], x)
    k = _project(params["k"], x)
    v = _project(params["v"], x)
    if axis == "h":
        scores = ad.einsum("diw,djw->wij", q, k)
        attn = ad.softmax(scores / math.sqrt(C), axis=-1)
        ctx = ad.einsum("wij,djw->diw", attn, v)
    elif axis == "w":
        scores = ad.einsum("dhi,dhj->hij", q, k)
        attn = ad.softmax(scores / math.sqrt(C), axis=-1)
        ctx = ad.einsum("hij,dhj->dhi", attn, v)
    else:
        raise ValueError(f"axis must be 'h' or 'w', got {axis!r}")
    return x + _project(params["o"], ctx)


def axial_attention(x: Tensor, params: Mapping[str, Tensor], axes=AXES) -> Tensor:
    for axis in axes:
        x = axial_pass(x, axis, nn.scope(params, axis))
    return x


def phi_spec(channels: int) -> ConvSpec:
    return ConvSpec(channels, channels, kernel=3)


def out_spec(channels: int) -> ConvSpec:
    return ConvSpec(2 * channels, 1, kernel=3)


def acre_block(F: Tensor, m_prev: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Refined mask logits (1, H, W) from features F and previous mask logits."""
    C, H, W = F.shape
    feat = axial_attention(F, nn.scope(params, "attn"))
    gate = ad.sigmoid(nn.resize_bilinear(m_prev, (H, W)))
    fore = nn.conv_relu(feat * gate, phi_spec(C), nn.scope(params, "fore"))
    back = nn.conv_relu(feat * (1.0 - gate), phi_spec(C), nn.scope(params, "back"))
    return nn.conv2d(nn.concat_channels([fore, back]), out_spec(C), nn.scope(params, "out"))


def param_specs(channels: int) -> dict[str, ParamSpec]:
    specs: dict[str, ParamSpec] = {}
    for axis in AXES:
        for proj in ("q", "k", "v", "o"):
            specs[f"attn.{axis}.{proj}"] = ParamSpec((channels, channels), gain=1.0)
    specs.update(nn.prefixed("fore", phi_spec(channels).param_specs()))
    specs.update(nn.prefixed("back", phi_spec(channels).param_specs()))
    specs.update(nn.prefixed("out", out_spec(channels).param_specs(gain=1.0)))
    return specs
