import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orient.errors import DimensionError, FormatError, IoError, VersionError
from orient.features import (
    ExtractorConfig,
    FeaturePyramid,
    decode_pyramid,
    encode_pyramid,
    extract,
    extract_batch,
    load_pyramid,
    save_pyramid,
)
from orient.preproc import local_normalize


def brute_histograms(img, h, w, c):
    """Pixel loop: central differences, unsigned angle, magnitude-weighted bins per cell."""
    n = img.shape[0]
    hist = np.zeros((h, w, c))
    for y in range(n):
        for x in range(n):
            yl, yh = max(y - 1, 0), min(y + 1, n - 1)
            xl, xh = max(x - 1, 0), min(x + 1, n - 1)
            gy = (img[yh, x] - img[yl, x]) / (yh - yl)
            gx = (img[y, xh] - img[y, xl]) / (xh - xl)
            mag = np.hypot(gx, gy)
            ang = np.arctan2(gy, gx) % np.pi
            b = min(int(ang * c / np.pi), c - 1)
            u = next(k for k in range(h) if (128 * k) // h <= y < (128 * (k + 1)) // h)
            v = next(k for k in range(w) if (128 * k) // w <= x < (128 * (k + 1)) // w)
            hist[u, v, b] += mag
    norm = np.linalg.norm(hist, axis=-1, keepdims=True)
    return hist / np.maximum(norm, 1e-8)


def random_image(seed):
    return local_normalize(np.random.default_rng(seed).random((128, 128)))


def test_default_config():
    cfg = ExtractorConfig()
    assert cfg.scale_dims == ((13, 13), (26, 26), (52, 52))
    assert cfg.channels == 8
    assert cfg.fingerprint == "13x13,26x26,52x52/c8"


@pytest.mark.parametrize("dims", [((13, 13), (13, 13)), ((26, 26), (13, 13)), ((1, 1),), ((4, 4), (200, 200)), ()])
def test_config_rejects_bad_dims(dims):
    with pytest.raises((DimensionError, ValueError)):
        ExtractorConfig(dims)


def test_constant_image_gives_zero_pyramid():
    pyr = extract(np.full((128, 128), 2.0))
    assert all(np.all(m == 0) for m in pyr.scales)


def test_matches_brute_force_oracle():
    img = random_image(0)
    cfg = ExtractorConfig(((5, 7), (13, 13)), 6)
    pyr = extract(img, cfg)
    for (h, w), m in zip(cfg.scale_dims, pyr.scales):
        assert np.abs(m - brute_histograms(img, h, w, 6)).max() < 1e-6


def test_vertical_step_edge():
    img = np.zeros((128, 128))
    img[:, 64:] = 1.0
    m = extract(img).scales[0]
    energy = np.linalg.norm(m, axis=-1)
    cols_with_energy = set(np.flatnonzero(energy.max(axis=0) > 0))
    # pixels 63 and 64 carry the gradient; both lie in cell column 6 (pixels 59..67)
    assert cols_with_energy == {6}
    assert np.all(np.argmax(m[:, 6], axis=-1) == 0)
    oracle = brute_histograms(img, 13, 13, 8)
    assert np.abs(m - oracle).max() < 1e-6


def test_horizontal_edge_uses_90_degree_bin():
    img = np.zeros((128, 128))
    img[64:, :] = 1.0
    m = extract(img).scales[0]
    assert np.all(np.argmax(m[6], axis=-1) == 4)


def test_cell_norms_are_zero_or_one():
    pyr = extract(random_image(1))
    for m in pyr.scales:
        n = np.linalg.norm(m.astype(np.float64), axis=-1)
        assert np.all((n == 0) | (np.abs(n - 1) <= 1e-5))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_cell_norm_property(seed, channels):
    rng = np.random.default_rng(seed)
    img = rng.random((128, 128))
    img[rng.random((128, 128)) < 0.3] = 0.0
    for m in extract(img, ExtractorConfig(((4, 4), (13, 13)), channels)).scales:
        n = np.linalg.norm(m.astype(np.float64), axis=-1)
        assert np.all((n == 0) | (np.abs(n - 1) <= 1e-5))


def test_extract_is_deterministic():
    img = random_image(2)
    a, b = extract(img), extract(img)
    assert all(np.array_equal(x, y) for x, y in zip(a.scales, b.scales))


def test_batch_matches_single():
    imgs = np.stack([random_image(s) for s in range(3)])
    batch = extract_batch(imgs)
    for k in range(3):
        single = extract(imgs[k])
        assert all(np.array_equal(b[k], s) for b, s in zip(batch, single.scales))


def test_translation_by_one_cell():
    # cell boundaries at 13x13 are floor(128 u / 13): widths 9 or 10
    bounds = [(128 * u) // 13 for u in range(14)]
    shift = 10
    img = np.random.default_rng(3).random((128, 128))
    shifted = np.zeros_like(img)
    shifted[:, shift:] = img[:, :-shift]
    a, b = extract(img).scales[0], extract(shifted).scales[0]
    compared = 0
    # skip the last target cell: its right border uses a one-sided difference
    for v in range(1, 11):
        # cell v moved by `shift` pixels is exactly cell v + 1
        if bounds[v] + shift == bounds[v + 1] and bounds[v + 1] + shift == bounds[v + 2]:
            assert np.abs(b[:, v + 1] - a[:, v]).max() < 1e-5
            compared += 1
    assert compared >= 6


def test_extract_rejects_wrong_size():
    with pytest.raises(DimensionError):
        extract_batch(np.zeros((1, 64, 64)))


# ---------------------------------------------------------------- pyramid type and files


def test_pyramid_validation():
    with pytest.raises(DimensionError):
        FeaturePyramid((np.zeros((4, 4, 2)), np.zeros((8, 8, 3))))
    with pytest.raises(DimensionError):
        FeaturePyramid((np.zeros((8, 8, 2)), np.zeros((4, 4, 2))))
    with pytest.raises(ValueError):
        FeaturePyramid((np.full((4, 4, 2), np.inf),))
    with pytest.raises(DimensionError):
        FeaturePyramid(())


def test_round_trip(tmp_path):
    pyr = extract(random_image(4))
    save_pyramid(pyr, tmp_path / "p.fpyr")
    back = load_pyramid(tmp_path / "p.fpyr")
    assert back == pyr
    assert (tmp_path / "p.fpyr").read_bytes() == encode_pyramid(back)


def test_file_layout():
    pyr = FeaturePyramid((np.arange(12, dtype=np.float32).reshape(2, 2, 3), np.ones((3, 4, 3), np.float32)))
    data = encode_pyramid(pyr)
    assert data[:4] == b"FPYR"
    assert struct.unpack_from("<IIIIIII", data, 4) == (1, 2, 3, 2, 2, 3, 4)
    body = np.frombuffer(data[32:], dtype="<f4")
    assert np.array_equal(body[:12], np.arange(12))  # row-major, channel fastest
    assert len(data) == 32 + 4 * (12 + 36)


def test_bad_magic():
    data = bytearray(encode_pyramid(extract(random_image(5))))
    data[0:4] = b"XPYR"
    with pytest.raises(FormatError):
        decode_pyramid(bytes(data))


def test_bad_version():
    data = bytearray(encode_pyramid(extract(random_image(5))))
    struct.pack_into("<I", data, 4, 7)
    with pytest.raises(VersionError):
        decode_pyramid(bytes(data))


def test_decreasing_dims_rejected():
    pyr = FeaturePyramid((np.zeros((13, 13, 2), np.float32), np.zeros((26, 26, 2), np.float32)))
    data = bytearray(encode_pyramid(pyr))
    struct.pack_into("<IIII", data, 16, 26, 26, 13, 13)
    with pytest.raises(DimensionError):
        decode_pyramid(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 20, 100])
def test_truncated(cut):
    data = encode_pyramid(extract(random_image(6), ExtractorConfig(((4, 4), (8, 8)))))
    with pytest.raises(FormatError):
        decode_pyramid(data[:-cut])


def test_trailing_bytes():
    data = encode_pyramid(extract(random_image(6), ExtractorConfig(((4, 4),))))
    with pytest.raises(FormatError):
        decode_pyramid(data + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_pyramid(tmp_path / "missing.fpyr")
