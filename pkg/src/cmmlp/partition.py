"""Grid and block rearrangements used by the global and local token-mixing MLPs.

Both lay a (C, H, W) map out as (patch, position-in-patch, C).  Patches are
numbered row-major over the patch lattice, positions row-major inside a
patch.  ``grid`` fixes the number of patches per side (g), ``block`` fixes
the patch side (b); for a square map ``grid(x, g)`` equals ``block(x, H // g)``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ShapeError, Tensor


class PartitionError(ShapeError):
    pass


@dataclass(frozen=True)
class GridLayout:
    g: int
    H: int
    W: int

    def __post_init__(self):
        if self.g < 1 or self.H % self.g or self.W % self.g:
            raise PartitionError(f"grid factor g={self.g} must divide H={self.H} and W={self.W}")

    @property
    def patch(self) -> tuple[int, int]:
        return self.H // self.g, self.W // self.g


@dataclass(frozen=True)
class BlockLayout:
    b: int
    H: int
    W: int

    def __post_init__(self):
        if self.b < 1 or self.H % self.b or self.W % self.b:
            raise PartitionError(f"block size b={self.b} must divide H={self.H} and W={self.W}")

    @property
    def counts(self) -> tuple[int, int]:
        return self.H // self.b, self.W // self.b


def _patchify(x: Tensor, nh: int, nw: int) -> Tensor:
    C, H, W = x.shape
    ph, pw = H // nh, W // nw
    t = x.reshape(C, nh, ph, nw, pw).transpose(1, 3, 2, 4, 0)
    return t.reshape(nh * nw, ph * pw, C)


def _unpatchify(t: Tensor, nh: int, nw: int, H: int, W: int) -> Tensor:
    C = t.shape[2]
    ph, pw = H // nh, W // nw
    if t.shape[:2] != (nh * nw, ph * pw):
        raise PartitionError(f"tensor {t.shape} does not match a {nh}x{nw} lattice of {ph}x{pw} patches")
    return t.reshape(nh, nw, ph, pw, C).transpose(4, 0, 2, 1, 3).reshape(C, H, W)


def grid(x: Tensor, g: int) -> Tensor:
    """(C, H, W) -> (g*g, H/g * W/g, C)."""
    _, H, W = x.shape
    GridLayout(g, H, W)
    return _patchify(x, g, g)


def ungrid(t: Tensor, g: int, H: int, W: int) -> Tensor:
    GridLayout(g, H, W)
    return _unpatchify(t, g, g, H, W)


def block(x: Tensor, b: int) -> Tensor:
    """(C, H, W) -> (H/b * W/b, b*b, C)."""
    _, H, W = x.shape
    nh, nw = BlockLayout(b, H, W).counts
    return _patchify(x, nh, nw)


def unblock(t: Tensor, b: int, H: int, W: int) -> Tensor:
    nh, nw = BlockLayout(b, H, W).counts
    return _unpatchify(t, nh, nw, H, W)
