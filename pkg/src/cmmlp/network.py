"""Full network: five-stage encoder, partial decoder, three refinement branches."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import acre, mfi, nn
from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import ConvSpec, ParamSpec
from .params import ParamStore

# ablation settings: name -> ModelConfig field overrides
ABLATIONS: dict[str, dict] = {
    "full": {},
    "w/o-MFI": {"use_mfi": False},
    "w/o-Local": {"use_local": False},
    "w/o-Global": {"use_global": False},
    "w/o-ACRE": {"use_acre": False},
    "MFI-PP": {"mfi_variant": "pp"},
    "MFI-CP": {"mfi_variant": "cp"},
    "stripped": {"use_mfi": False, "use_acre": False},
}


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (8, 16, 32, 64, 128)
    in_channels: int = 3
    decoder_channels: int = 32
    use_mfi: bool = True
    use_acre: bool = True
    use_global: bool = True
    use_local: bool = True
    mfi_variant: str = "series"
    max_cascade: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 5:
            raise ValueError(f"encoder needs 5 stage widths, got {self.widths}")
        if any(w % 2 for w in self.widths[2:]) and self.use_mfi:
            raise ValueError(f"branch widths must be even for the MFI split, got {self.widths[2:]}")
        if self.mfi_variant not in mfi.VARIANTS:
            raise ValueError(f"unknown MFI variant {self.mfi_variant!r}")
        if self.use_mfi and not (self.use_global or self.use_local):
            raise ValueError("MFI needs at least one of the global and local MLPs")

    def ablate(self, setting: str) -> "ModelConfig":
        if setting not in ABLATIONS:
            raise KeyError(f"unknown ablation setting {setting!r}; known: {sorted(ABLATIONS)}")
        return replace(self, **ABLATIONS[setting])

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def branch_channels(self) -> tuple[int, int, int]:
        """Channels of F1 (deepest), F2, F3."""
        return self.widths[4], self.widths[3], self.widths[2]


@dataclass
class Outputs:
    masks: list[Tensor]          # M0..M3 logits at 1/32, 1/16, 1/8, 1/4
    refined: list[Tensor]        # M'0..M'2 logits
    final: Tensor                # sigmoid(M3) resized to the input
    features: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# encoder

def stage_specs(config: ModelConfig) -> list[tuple[ConvSpec, ConvSpec]]:
    out = []
    c_in = config.in_channels
    for c in config.widths:
        out.append((ConvSpec(c_in, c, 3, stride=2), ConvSpec(c, c, 3)))
        c_in = c
    return out


def check_input(shape: tuple[int, ...], config: ModelConfig) -> None:
    if len(shape) != 3 or shape[0] != config.in_channels:
        raise ShapeError(f"expected a ({config.in_channels}, H, W) image, got {shape}")
    _, H, W = shape
    if H % 32 or W % 32 or H < 64 or W < 64:
        raise ShapeError(f"image sides must be multiples of 32 and >= 64, got {H}x{W}")
    if H != W:
        raise ShapeError(f"image must be square for the cascade schedules, got {H}x{W}")


def encode(image: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> list[Tensor]:
    """All five stage outputs, shallow to deep (1/2 ... 1/32)."""
    check_input(image.shape, config)
    x = image
    stages = []
    for s, (down, same) in enumerate(stage_specs(config), start=1):
        x = nn.conv_relu(x, down, nn.scope(params, f"enc.s{s}.down"))
        x = nn.conv_relu(x, same, nn.scope(params, f"enc.s{s}.conv"))
        stages.append(x)
    return stages


# ---------------------------------------------------------------------------
# partial decoder

def decoder_specs(config: ModelConfig) -> dict[str, ConvSpec]:
    cd = config.decoder_channels
    c1, c2, c3 = config.branch_channels
    return {
        "red1": ConvSpec(c1, cd, 1),
        "red2": ConvSpec(c2, cd, 1),
        "red3": ConvSpec(c3, cd, 1),
        "cat": ConvSpec(3 * cd, 1, 3),
        "down1": ConvSpec(1, 1, 3, stride=2),
        "down2": ConvSpec(1, 1, 3, stride=2),
    }


def partial_decode(f1: Tensor, f2: Tensor, f3: Tensor, params: Mapping[str, Tensor],
                   config: ModelConfig) -> Tensor:
    """Coarse mask logits M0 at the scale of f1 (1/32).

    Channel-matched features are multiplied deep-to-shallow at common sizes,
    concatenated at 1/8, reduced to one channel and downsampled twice.
    """
    specs = decoder_specs(config)
    a1 = nn.conv_relu(f1, specs["red1"], nn.scope(params, "red1"))
    a2 = nn.conv_relu(f2, specs["red2"], nn.scope(params, "red2"))
    a3 = nn.conv_relu(f3, specs["red3"], nn.scope(params, "red3"))
    s2, s3 = f2.shape[1:], f3.shape[1:]
    x2 = nn.resize_bilinear(a1, s2) * a2
    x3 = nn.resize_bilinear(x2, s3) * a3
    cat = nn.concat_channels([nn.resize_bilinear(a1, s3), nn.resize_bilinear(x2, s3), x3])
    m = nn.conv2d(cat, specs["cat"], nn.scope(params, "cat"))
    m = nn.conv2d(m, specs["down1"], nn.scope(params, "down1"))
    return nn.conv2d(m, specs["down2"], nn.scope(params, "down2"))


# ---------------------------------------------------------------------------
# refinement branches

def merge_spec() -> ConvSpec:
    return ConvSpec(2, 1, 3)


def plain_mask_spec(channels: int) -> ConvSpec:
    return ConvSpec(channels, 1, 3)


def branch_step(f: Tensor, m_prev: Tensor, params: Mapping[str, Tensor],
                config: ModelConfig) -> tuple[Tensor, Tensor]:
    """(M'_{i-1}, M_i) from branch features F_i and the previous mask M_{i-1}."""
    C, H, W = f.shape
    if m_prev.shape[1:] != (H, W):
        m_prev = nn.resize_bilinear(m_prev, (H, W))
    if config.use_mfi:
        schedule = mfi.CascadeSchedule.for_side(H, config.max_cascade)
        f = mfi.mfi_block(f, schedule, nn.scope(params, "mfi"), config.mfi_variant,
                          config.use_global, config.use_local)
    if config.use_acre:
        refined = acre.acre_block(f, m_prev, nn.scope(params, "acre"))
    else:
        refined = nn.conv2d(f, plain_mask_spec(C), nn.scope(params, "mask"))
    merged = nn.conv2d(nn.concat_channels([refined, m_prev]), merge_spec(),
                       nn.scope(params, "merge"))
    return refined, nn.resize_bilinear(merged, (2 * H, 2 * W))


def forward_full(image: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Outputs:
    stages = encode(image, params, config)
    f3, f2, f1 = stages[2], stages[3], stages[4]
    m = partial_decode(f1, f2, f3, nn.scope(params, "dec"), config)
    masks, refined = [m], []
    for i, f in enumerate((f1, f2, f3), start=1):
        r, m = branch_step(f, m, nn.scope(params, f"branch{i}"), config)
        refined.append(r)
        masks.append(m)
    final = nn.resize_bilinear(ad.sigmoid(m), image.shape[1:])
    return Outputs(masks, refined, final, [f1, f2, f3])


# ---------------------------------------------------------------------------
# parameters

def param_specs(config: ModelConfig, image_size: int = 128) -> dict[str, ParamSpec]:
    """Declared parameters.  MLP extents depend on the branch sides, i.e. on ``image_size``."""
    specs: dict[str, ParamSpec] = {}
    for s, (down, same) in enumerate(stage_specs(config), start=1):
        specs.update(nn.prefixed(f"enc.s{s}.down", down.param_specs()))
        specs.update(nn.prefixed(f"enc.s{s}.conv", same.param_specs()))
    for name, spec in decoder_specs(config).items():
        gain = 2.0 if spec.out_channels > 1 else 1.0
        specs.update(nn.prefixed(f"dec.{name}", spec.param_specs(gain)))
    sides = (image_size // 32, image_size // 16, image_size // 8)
    for i, (c, side) in enumerate(zip(config.branch_channels, sides), start=1):
        pre = f"branch{i}"
        if config.use_mfi:
            schedule = mfi.CascadeSchedule.for_side(side, config.max_cascade)
            specs.update(nn.prefixed(f"{pre}.mfi", mfi.param_specs(
                c, schedule, config.use_global, config.use_local)))
        if config.use_acre:
            specs.update(nn.prefixed(f"{pre}.acre", acre.param_specs(c)))
        else:
            specs.update(nn.prefixed(f"{pre}.mask", plain_mask_spec(c).param_specs(gain=1.0)))
        specs.update(nn.prefixed(f"{pre}.merge", merge_spec().param_specs(gain=1.0)))
    return specs


def init_params(config: ModelConfig, image_size: int = 128, seed: int = 0,
                dtype=np.float32) -> ParamStore:
    return nn.materialize(param_specs(config, image_size), seed, dtype)


def param_count(config: ModelConfig, image_size: int = 128) -> int:
    return int(sum(np.prod(s.shape) for s in param_specs(config, image_size).values()))
