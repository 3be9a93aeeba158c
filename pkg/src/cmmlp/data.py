"""Synthetic complex-edge datasets, PNG directory IO, splits and augmentation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray   # (3, H, W) float32 in [0, 1]
    mask: np.ndarray    # (1, H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise DataError(f"{self.id}: expected (3,H,W) image and (1,H,W) mask, "
                            f"got {self.image.shape} and {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 8
    size: int = 128
    blobs: tuple[int, int] = (1, 4)
    radius: tuple[float, float] = (0.14, 0.24)      # base radius as a fraction of size
    amplitude: tuple[float, float] = (0.05, 0.15)   # per radial wave
    frequency: tuple[int, int] = (3, 7)
    waves: int = 2
    noise: float = 0.1
    contrast: tuple[float, float] = (0.08, 0.18)    # low, so edges rather than colour carry the mask
    allow_overlap: bool = False

    def __post_init__(self):
        if self.size % 32 or self.size < 32:
            raise DataError(f"synthetic size must be a positive multiple of 32, got {self.size}")
        lo, hi = self.blobs
        if not 1 <= lo <= hi:
            raise DataError(f"invalid blob count range {self.blobs}")
        if self.waves * self.amplitude[1] >= 1:
            raise DataError("wave amplitudes must sum below 1 to keep radii positive")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise DataError(f"invalid contrast range {self.contrast}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synth spec keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class _Blob:
    cy: float
    cx: float
    r0: float
    amps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    freqs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phases: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def r_max(self) -> float:
        return self.r0 * (1 + float(np.abs(self.amps).sum()))

    def rasterize(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        dy, dx = yy - self.cy, xx - self.cx
        rho = np.hypot(dy, dx)
        theta = np.arctan2(dy, dx)
        r = self.r0 * (1 + (self.amps[:, None, None]
                            * np.sin(self.freqs[:, None, None] * theta + self.phases[:, None, None])).sum(0))
        return rho <= r


def _draw_blobs(rng: np.random.Generator, spec: SynthSpec) -> list[_Blob]:
    n = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    size = spec.size
    blobs: list[_Blob] = []
    shrink = 1.0
    attempts = 0
    while len(blobs) < n:
        r0 = rng.uniform(*spec.radius) * size * shrink
        amps = rng.uniform(*spec.amplitude, size=spec.waves)
        freqs = rng.integers(spec.frequency[0], spec.frequency[1] + 1, size=spec.waves).astype(float)
        phases = rng.uniform(0, 2 * math.pi, size=spec.waves)
        r_max = r0 * (1 + amps.sum())
        margin = r_max + 2
        if margin * 2 >= size:
            shrink *= 0.9
            continue
        cy, cx = rng.uniform(margin, size - margin, size=2)
        cand = _Blob(cy, cx, r0, amps, freqs, phases)
        ok = spec.allow_overlap or all(
            math.hypot(cy - b.cy, cx - b.cx) > r_max + b.r_max + 2 for b in blobs)
        if ok:
            blobs.append(cand)
            continue
        attempts += 1
        if attempts % 50 == 0:
            shrink *= 0.9
    return blobs


def _render(rng: np.random.Generator, mask: np.ndarray, spec: SynthSpec) -> np.ndarray:
    size = spec.size
    bg = rng.uniform(0.15, 0.45, size=3)
    fg = np.clip(bg + rng.uniform(*spec.contrast, size=3), 0, 1)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.0)
    shading = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    shading *= 0.08 / max(shading.std(), 1e-12)
    img = bg[:, None, None] + (fg - bg)[:, None, None] * soft[None] + shading[None]
    texture = ndimage.gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 0.8, 0.8))
    texture *= spec.noise / max(texture.std(), 1e-12)
    return np.clip(img + texture, 0.0, 1.0).astype(np.float32)


def generate(spec: SynthSpec) -> list[Sample]:
    """Deterministic list of samples; sample i draws from the stream (seed, i)."""
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        blobs = _draw_blobs(rng, spec)
        mask = np.zeros((spec.size, spec.size), dtype=bool)
        for b in blobs:
            mask |= b.rasterize(spec.size)
        image = _render(rng, mask, spec)
        out.append(Sample(image, mask[None].astype(np.uint8), f"synth_{i:04d}"))
    return out


# ---------------------------------------------------------------------------
# PNG directories: <root>/images/*.png and <root>/masks/*.png matched by stem

def save_png_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_png_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask).reshape(mask.shape[-2:]) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def write_dir(samples: Sequence[Sample], root, spec: SynthSpec | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_png_image(root / "images" / f"{s.id}.png", s.image)
        save_png_mask(root / "masks" / f"{s.id}.png", s.mask)
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return root


def _read(path: Path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
        return im
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable file {path}: {exc}") from exc


def load_dir(images_path, masks_path, size: int | None = None) -> list[Sample]:
    images_path, masks_path = Path(images_path), Path(masks_path)
    for p in (images_path, masks_path):
        if not p.is_dir():
            raise DataError(f"not a directory: {p}")
    images = {p.stem: p for p in sorted(images_path.glob("*.png"))}
    masks = {p.stem: p for p in sorted(masks_path.glob("*.png"))}
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DataError(f"no mask for image {missing[0]!r}")
    orphans = sorted(set(masks) - set(images))
    if orphans:
        raise DataError(f"no image for mask {orphans[0]!r}")
    out = []
    for stem in sorted(images):
        im = _read(images[stem]).convert("RGB")
        mk = _read(masks[stem])
        if mk.mode not in ("L", "1"):
            raise DataError(f"mask {masks[stem]} is not grayscale (mode {mk.mode})")
        mk = mk.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        if size is not None and mk.size != (size, size):
            mk = mk.resize((size, size), Image.NEAREST)
        image = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        mask = (np.asarray(mk) >= 128).astype(np.uint8)[None]
        out.append(Sample(np.ascontiguousarray(image), mask, stem))
    return out


def load_root(root, size: int | None = None) -> list[Sample]:
    root = Path(root)
    return load_dir(root / "images", root / "masks", size)


# ---------------------------------------------------------------------------
# splits and augmentation

def split(samples: Sequence[Sample], ratios=(7, 1, 2), seed: int = 0):
    n = len(samples)
    if n == 0:
        raise DataError("cannot split an empty sample list")
    total = float(sum(ratios))
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    if n_val + n_test > n:
        n_test = n - n_val
    order = np.random.default_rng(seed).permutation(n)
    picked = [samples[i] for i in order]
    n_train = n - n_val - n_test
    return picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:]


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_affine: float = 0.5
    rotation: float = 15.0              # degrees, symmetric
    translation: float = 0.05           # fraction of the side, symmetric
    scale: tuple[float, float] = (0.9, 1.1)


@dataclass(frozen=True)
class AugmentDraw:
    hflip: bool = False
    vflip: bool = False
    affine: bool = False
    angle: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    zoom: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.affine)


def draw_augment(seed, config: AugmentConfig = AugmentConfig()) -> AugmentDraw:
    rng = np.random.default_rng(seed)
    hflip = bool(rng.random() < config.p_hflip)
    vflip = bool(rng.random() < config.p_vflip)
    affine = bool(rng.random() < config.p_affine)
    angle = float(rng.uniform(-config.rotation, config.rotation))
    shift = tuple(float(v) for v in rng.uniform(-config.translation, config.translation, size=2))
    zoom = float(rng.uniform(*config.scale))
    if not affine:
        angle, shift, zoom = 0.0, (0.0, 0.0), 1.0
    return AugmentDraw(hflip, vflip, affine, angle, shift, zoom)


def _warp(arr: np.ndarray, draw: AugmentDraw, order: int) -> np.ndarray:
    _, H, W = arr.shape
    theta = math.radians(draw.angle)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    fwd = rot * draw.zoom
    inv = np.linalg.inv(fwd)
    center = np.array([(H - 1) / 2, (W - 1) / 2])
    shift = np.array([draw.shift[0] * H, draw.shift[1] * W])
    # input = inv @ (output - center - shift) + center
    offset = center - inv @ (center + shift)
    mode = "nearest" if order else "constant"
    return np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=order, mode=mode)
                     for ch in arr])


def apply_augment(sample: Sample, draw: AugmentDraw) -> Sample:
    image, mask = sample.image, sample.mask
    if draw.hflip:
        image, mask = image[:, :, ::-1], mask[:, :, ::-1]
    if draw.vflip:
        image, mask = image[:, ::-1, :], mask[:, ::-1, :]
    if draw.affine:
        image = np.clip(_warp(image.astype(np.float64), draw, order=1), 0, 1)
        mask = _warp(mask.astype(np.float64), draw, order=0) >= 0.5
    return Sample(np.ascontiguousarray(image, dtype=np.float32),
                  np.ascontiguousarray(mask, dtype=np.uint8), sample.id)


def augment(sample: Sample, seed, config: AugmentConfig = AugmentConfig()) -> Sample:
    return apply_augment(sample, draw_augment(seed, config))


def hflip(sample: Sample) -> Sample:
    return apply_augment(sample, AugmentDraw(hflip=True))
