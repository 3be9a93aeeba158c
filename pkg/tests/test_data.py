import json
import math

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from cmmlp import data
from cmmlp.data import AugmentConfig, AugmentDraw, DataError, Sample, SynthSpec


def perimeter(mask):
    """Crofton estimate from boundary crossings along four line directions."""
    m = mask.astype(np.int8)
    straight = np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum()
    diagonal = np.abs(m[1:, 1:] - m[:-1, :-1]).sum() + np.abs(m[1:, :-1] - m[:-1, 1:]).sum()
    return math.pi / 8 * (straight + diagonal / math.sqrt(2))


def test_perimeter_estimator_on_disk():
    yy, xx = np.mgrid[:128, :128] + 0.5
    disk = np.hypot(yy - 64, xx - 64) <= 30
    assert perimeter(disk) == pytest.approx(2 * math.pi * 30, rel=0.02)


def test_disks_have_circle_area():
    spec = SynthSpec(seed=3, count=6, size=128, blobs=(1, 1), amplitude=(0.0, 0.0))
    for s in data.generate(spec):
        m = s.mask[0]
        # a raster disk of radius r differs from pi r^2 by O(r)
        ys, xs = np.nonzero(m)
        radius = (xs.max() - xs.min() + 1) / 2
        assert abs(m.sum() - math.pi * radius ** 2) < 2 * math.pi * radius


def test_two_disjoint_blobs_give_two_components():
    spec = SynthSpec(seed=1, count=10, size=128, blobs=(2, 2))
    for s in data.generate(spec):
        _, n = ndimage.label(s.mask[0])
        assert n == 2, s.id


def test_generation_is_deterministic():
    spec = SynthSpec(seed=5, count=3, size=64)
    a, b = data.generate(spec), data.generate(spec)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
    c = data.generate(SynthSpec(seed=6, count=3, size=64))
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_sample_contract():
    s = data.generate(SynthSpec(count=2, size=64))[1]
    assert s.id == "synth_0001"
    assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
    assert s.mask.shape == (1, 64, 64) and set(np.unique(s.mask)) <= {0, 1}
    assert 0 <= s.image.min() and s.image.max() <= 1


def test_invalid_specs():
    with pytest.raises(DataError):
        SynthSpec(size=100)
    with pytest.raises(DataError):
        SynthSpec(blobs=(3, 2))
    with pytest.raises(DataError):
        SynthSpec(amplitude=(0.1, 0.6))
    with pytest.raises(DataError, match="contrast"):
        SynthSpec(contrast=(0.2, 0.1))
    with pytest.raises(DataError, match="unknown"):
        SynthSpec.from_dict({"seed": 1, "colour": 3})


def test_contrast_sets_colour_gap():
    # same seed, so only the colour gap differs; shading and texture cancel in the difference
    low, high = (data.generate(SynthSpec(seed=3, count=4, size=64, noise=0.0, contrast=c))
                 for c in ((0.1, 0.1), (0.3, 0.3)))
    for a, b in zip(low, high):
        assert np.array_equal(a.mask, b.mask)
        fg = a.mask[0] == 1
        gap = lambda s: s.image[:, fg].mean(axis=1) - s.image[:, ~fg].mean(axis=1)
        assert np.all(gap(b) - gap(a) > 0.1), a.id


def test_spec_dict_roundtrip():
    spec = SynthSpec(seed=9, blobs=(2, 3), noise=0.1)
    assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_wavy_edges_exceed_disk_perimeter():
    spec = SynthSpec(seed=2, count=6, size=128, blobs=(1, 1), amplitude=(0.1, 0.15))
    for s in data.generate(spec):
        m = s.mask[0]
        yy, xx = np.mgrid[:128, :128] + 0.5
        disk = np.hypot(yy - 64, xx - 64) <= math.sqrt(m.sum() / math.pi)
        assert perimeter(m) / m.sum() > perimeter(disk) / disk.sum(), s.id


def test_write_and_load_roundtrip(tmp_path):
    spec = SynthSpec(count=3, size=64)
    samples = data.generate(spec)
    data.write_dir(samples, tmp_path, spec)
    assert json.loads((tmp_path / "spec.json").read_text())["count"] == 3
    loaded = data.load_root(tmp_path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def make_pair(root, stem, mask_value=255, mask_mode="L", size=8):
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    Image.fromarray(np.full((size, size, 3), 100, np.uint8)).save(root / "images" / f"{stem}.png")
    m = np.zeros((size, size), np.uint8)
    m[: size // 2] = mask_value
    if mask_mode == "RGB":
        Image.fromarray(np.stack([m] * 3, -1)).save(root / "masks" / f"{stem}.png")
    else:
        Image.fromarray(m).save(root / "masks" / f"{stem}.png")


def test_load_ten_pairs(tmp_path):
    for i in range(10):
        make_pair(tmp_path, f"img{i:02d}")
    samples = data.load_root(tmp_path)
    assert len(samples) == 10
    assert samples[0].id == "img00"


def test_mask_threshold(tmp_path):
    make_pair(tmp_path, "a", mask_value=200)
    make_pair(tmp_path, "b", mask_value=100)
    a, b = data.load_root(tmp_path)
    assert a.mask.sum() == 32 and b.mask.sum() == 0


def test_load_resizes(tmp_path):
    make_pair(tmp_path, "a", size=16)
    (s,) = data.load_root(tmp_path, size=32)
    assert s.image.shape == (3, 32, 32) and s.mask.shape == (1, 32, 32)
    assert set(np.unique(s.mask)) == {0, 1}


def test_missing_mask_names_stem(tmp_path):
    make_pair(tmp_path, "good")
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "lonely.png")
    with pytest.raises(DataError, match="lonely"):
        data.load_root(tmp_path)


def test_non_grayscale_mask_rejected(tmp_path):
    make_pair(tmp_path, "rgb", mask_mode="RGB")
    with pytest.raises(DataError, match="grayscale"):
        data.load_root(tmp_path)


def test_unreadable_file(tmp_path):
    make_pair(tmp_path, "x")
    (tmp_path / "images" / "x.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="unreadable"):
        data.load_root(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(DataError):
        data.load_root(tmp_path / "nope")


def fake_samples(n):
    return [Sample(np.zeros((3, 2, 2), np.float32), np.zeros((1, 2, 2), np.uint8), f"s{i}") for i in range(n)]


def test_split_ratios():
    train, val, test = data.split(fake_samples(10), seed=0)
    assert (len(train), len(val), len(test)) == (7, 1, 2)
    ids = [s.id for s in train + val + test]
    assert sorted(ids) == sorted(f"s{i}" for i in range(10))
    assert tuple(map(len, data.split(fake_samples(1)))) == (1, 0, 0)
    again = data.split(fake_samples(10), seed=0)
    assert [s.id for s in again[0]] == [s.id for s in train]
    with pytest.raises(DataError):
        data.split([])


@pytest.mark.parametrize("n", range(1, 30))
def test_split_covers_and_is_disjoint(n):
    parts = data.split(fake_samples(n), seed=n)
    ids = [s.id for p in parts for s in p]
    assert len(ids) == len(set(ids)) == n
    assert len(parts[0]) >= max(len(parts[1]), len(parts[2])) or n < 3


def test_noop_draw_leaves_sample_unchanged():
    s = data.generate(SynthSpec(count=1, size=64))[0]
    cfg = AugmentConfig(p_hflip=0, p_vflip=0, p_affine=0)
    draw = data.draw_augment(11, cfg)
    assert draw.is_identity
    out = data.augment(s, 11, cfg)
    assert out.image.tobytes() == s.image.tobytes() and out.mask.tobytes() == s.mask.tobytes()


def test_double_hflip_is_identity():
    s = data.generate(SynthSpec(count=1, size=64))[0]
    once = data.hflip(s)
    assert once.image.tobytes() != s.image.tobytes()
    twice = data.hflip(once)
    assert twice.image.tobytes() == s.image.tobytes() and twice.mask.tobytes() == s.mask.tobytes()


@pytest.mark.parametrize("seed", range(12))
def test_augment_keeps_mask_binary(seed):
    s = data.generate(SynthSpec(count=1, size=64, seed=seed))[0]
    out = data.augment(s, seed, AugmentConfig(p_affine=1.0))
    assert set(np.unique(out.mask)) <= {0, 1}
    assert out.image.shape == s.image.shape and out.mask.shape == s.mask.shape
    assert 0 <= out.image.min() and out.image.max() <= 1
    # a mild warp keeps most of the foreground
    assert abs(int(out.mask.sum()) - int(s.mask.sum())) < 0.35 * s.mask.sum()


def test_augment_is_seed_deterministic():
    s = data.generate(SynthSpec(count=1, size=64))[0]
    a, b = data.augment(s, 4), data.augment(s, 4)
    assert a.image.tobytes() == b.image.tobytes()


def test_pure_vflip_draw():
    s = data.generate(SynthSpec(count=1, size=64))[0]
    out = data.apply_augment(s, AugmentDraw(vflip=True))
    np.testing.assert_array_equal(out.mask, s.mask[:, ::-1])
