"""Global/Local token-mixing MLPs, the cascade of both, and the two-branch
multi-scale feature interaction block."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from . import nn
from .autodiff import ShapeError, Tensor, relu
from .nn import ConvSpec, ParamSpec
from .partition import block, grid, unblock, ungrid

VARIANTS = ("series", "pp", "cp")
BRANCHES = ("up", "bottom")


@dataclass(frozen=True)
class CascadeSchedule:
    side: int
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a cascade schedule needs at least one (g, b) pair")
        for g, b in self.pairs:
            if g * b != self.side:
                raise ValueError(f"pair (g={g}, b={b}) violates g*b == side ({self.side})")
        gs = [g for g, _ in self.pairs]
        if any(a <= c for a, c in zip(gs, gs[1:])):
            raise ValueError(f"grid factors must strictly decrease, got {gs}")

    @property
    def depth(self) -> int:
        return len(self.pairs)

    @classmethod
    def for_side(cls, side: int, max_depth: int = 3) -> "CascadeSchedule":
        """g_k = side / 2^k, b_k = 2^k for k = 1..K with K = min(max_depth, log2(side) - 1).

        Sides of 2 (K would be 0) fall back to the single pair (1, 2).
        """
        if side < 2 or side & (side - 1):
            raise ValueError(f"side must be a power of two >= 2, got {side}")
        depth = min(max_depth, int(math.log2(side)) - 1)
        if depth < 1:
            return cls(side, ((side // 2, 2),))
        return cls(side, tuple((side >> k, 1 << k) for k in range(1, depth + 1)))


def global_mlp(x: Tensor, g: int, params: Mapping[str, Tensor]) -> Tensor:
    """Mix across the g*g grid cells at each within-cell position (dilated, long range)."""
    _, H, W = x.shape
    t = nn.fc_axis(grid(x, g), 0, params["w"], params["b"])
    return ungrid(t, g, H, W)


def local_mlp(x: Tensor, b: int, params: Mapping[str, Tensor]) -> Tensor:
    """Mix the b*b positions inside each block."""
    _, H, W = x.shape
    t = nn.fc_axis(block(x, b), 1, params["w"], params["b"])
    return unblock(t, b, H, W)


def cascade_mlp(x: Tensor, pair: tuple[int, int], params: Mapping[str, Tensor],
                use_global: bool = True, use_local: bool = True,
                parallel: bool = False) -> Tensor:
    g, b = pair
    if not (use_global or use_local):
        raise ValueError("cascade needs at least one of the global and local MLPs")
    if parallel:
        parts = []
        if use_global:
            parts.append(relu(global_mlp(x, g, nn.scope(params, "global"))))
        if use_local:
            parts.append(relu(local_mlp(x, b, nn.scope(params, "local"))))
        return parts[0] if len(parts) == 1 else parts[0] + parts[1]
    if use_global:
        x = relu(global_mlp(x, g, nn.scope(params, "global")))
    if use_local:
        x = relu(local_mlp(x, b, nn.scope(params, "local")))
    return x


def branch(x: Tensor, schedule: CascadeSchedule, params: Mapping[str, Tensor],
           variant: str = "series", use_global: bool = True, use_local: bool = True) -> Tensor:
    """Run one branch's K cascades: chained (series, pp) or summed over the input (cp)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown MFI variant {variant!r}; expected one of {VARIANTS}")
    if variant == "cp":
        out = None
        for k, pair in enumerate(schedule.pairs):
            y = cascade_mlp(x, pair, nn.scope(params, f"s{k}"), use_global, use_local)
            out = y if out is None else out + y
        return out
    for k, pair in enumerate(schedule.pairs):
        x = cascade_mlp(x, pair, nn.scope(params, f"s{k}"), use_global, use_local,
                        parallel=variant == "pp")
    return x


def mfi_block(F: Tensor, schedule: CascadeSchedule, params: Mapping[str, Tensor],
              variant: str = "series", use_global: bool = True, use_local: bool = True) -> Tensor:
    C, H, W = F.shape
    if C % 2:
        raise ShapeError(f"MFI splits channels in half; got odd C={C}")
    if H != W or H != schedule.side:
        raise ShapeError(f"schedule is for side {schedule.side}, feature map is {H}x{W}")
    f_up, f_bottom = nn.split_channels(F, C // 2)
    z_up = branch(f_up, schedule, nn.scope(params, "up"), variant, use_global, use_local)
    z_bottom = branch(f_bottom, schedule, nn.scope(params, "bottom"), variant, use_global, use_local)
    cross = z_bottom * z_up
    mixed_bottom = f_bottom + cross
    mixed_up = f_up + cross + mixed_bottom
    fused = nn.concat_channels([mixed_up, mixed_bottom])
    return nn.conv2d(fused, fusion_spec(C), nn.scope(params, "fuse"))


def fusion_spec(channels: int) -> ConvSpec:
    return ConvSpec(channels, channels, kernel=1)


def param_specs(channels: int, schedule: CascadeSchedule, use_global: bool = True,
                use_local: bool = True) -> dict[str, ParamSpec]:
    specs: dict[str, ParamSpec] = {}
    for side in BRANCHES:
        for k, (g, b) in enumerate(schedule.pairs):
            if use_global:
                n = g * g
                specs[f"{side}.s{k}.global.w"] = ParamSpec((n, n))
                specs[f"{side}.s{k}.global.b"] = ParamSpec((n,), kind="zeros")
            if use_local:
                n = b * b
                specs[f"{side}.s{k}.local.w"] = ParamSpec((n, n))
                specs[f"{side}.s{k}.local.b"] = ParamSpec((n,), kind="zeros")
    specs.update(nn.prefixed("fuse", fusion_spec(channels).param_specs(gain=1.0)))
    return specs
