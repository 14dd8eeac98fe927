import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orient.errors import FormatError, IoError, ShapeMismatch, VersionError
from orient.features import FeaturePyramid
from orient.fusion import (
    Variant,
    conv3x3,
    confidence_map,
    decode_params,
    encode_params,
    fuse,
    fuse_backward,
    fuse_with_grad,
    init_params,
    load_params,
    save_params,
    similarity_maps,
)
from orient.gradcheck import fusion_fd_error, random_instance

VARIANTS = list(Variant)
LEARNED = [v for v in Variant if v.learned]


def naive_conv(fmap, weight, bias):
    """Zero-padded 3x3 cross-correlation, one output pixel at a time."""
    h, w, c = fmap.shape
    out = np.full((h, w), float(bias))
    for y in range(h):
        for x in range(w):
            for dy in range(3):
                for dx in range(3):
                    yy, xx = y + dy - 1, x + dx - 1
                    if 0 <= yy < h and 0 <= xx < w:
                        out[y, x] += weight[dy, dx] @ fmap[yy, xx]
    return out


def random_pyramid(rng, dims=((4, 4), (7, 7)), c=5):
    return FeaturePyramid(tuple(rng.random((h, w, c)).astype(np.float32) for h, w in dims))


# ---------------------------------------------------------------- similarity maps


def test_self_similarity_sums_to_one():
    pyr = random_pyramid(np.random.default_rng(0))
    for m in similarity_maps(pyr, pyr):
        assert np.allclose(m.sum(axis=-1), 1.0, atol=1e-6)


def test_known_cosines():
    a = np.zeros((2, 2, 4), np.float32)
    b = np.zeros((2, 2, 4), np.float32)
    a[..., 0] = 1
    b[0, 0, :2] = 1 / np.sqrt(2)
    b[0, 1, 1] = 3.0  # orthogonal
    b[1, 0, 0] = 2.0
    # b[1, 1] stays the zero vector
    (m,) = similarity_maps(FeaturePyramid((a,)), FeaturePyramid((b,)))
    s = m.sum(axis=-1)
    assert s[0, 0] == pytest.approx(1 / np.sqrt(2), abs=1e-7)
    assert s[0, 1] == 0.0
    assert s[1, 0] == pytest.approx(1.0, abs=1e-7)
    assert np.all(m[1, 1] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_local_cosine_bounded(seed):
    rng = np.random.default_rng(seed)
    a = FeaturePyramid((rng.normal(size=(5, 5, 6)).astype(np.float32),))
    b = FeaturePyramid((rng.normal(size=(5, 5, 6)).astype(np.float32),))
    s = similarity_maps(a, b)[0].sum(axis=-1)
    assert np.all(np.abs(s) <= 1 + 1e-5)


def test_similarity_shape_mismatch():
    rng = np.random.default_rng(1)
    with pytest.raises(ShapeMismatch):
        similarity_maps(random_pyramid(rng), random_pyramid(rng, dims=((4, 4), (8, 8))))
    with pytest.raises(ShapeMismatch):
        similarity_maps(random_pyramid(rng), random_pyramid(rng, c=6))


# ---------------------------------------------------------------- convolution and confidence


@pytest.mark.parametrize("shape", [(1, 1, 3), (2, 5, 2), (6, 6, 4)])
def test_conv_matches_naive(shape):
    rng = np.random.default_rng(sum(shape))
    fmap = rng.normal(size=shape)
    weight = rng.normal(size=(3, 3, shape[-1]))
    assert np.allclose(conv3x3(fmap, weight, 0.3), naive_conv(fmap, weight, 0.3), atol=1e-12)


def test_conv_batched():
    rng = np.random.default_rng(4)
    fmaps = rng.normal(size=(3, 5, 5, 2))
    weight = rng.normal(size=(3, 3, 2))
    out = conv3x3(fmaps, weight, -1.0)
    for k in range(3):
        assert np.allclose(out[k], naive_conv(fmaps[k], weight, -1.0), atol=1e-12)


def test_average_confidence_uniform():
    w = confidence_map(np.random.default_rng(0).random((13, 13, 8)), None, Variant.AVERAGE)
    assert np.all(w == 1 / 169)


@pytest.mark.parametrize("variant", LEARNED)
def test_zero_params_give_uniform_confidence(variant):
    params = init_params(1, 8, 16)
    w = confidence_map(np.random.default_rng(1).random((13, 13, 8)), params, variant)
    assert np.allclose(w, 1 / 169, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(VARIANTS), st.floats(0.1, 200.0))
def test_confidence_normalized(seed, variant, scale):
    rng = np.random.default_rng(seed)
    params = init_params(2, 3, 6, seed=seed, mode="random", scale=scale)
    f = rng.normal(size=(6, 4, 3))
    w = confidence_map(f, params, variant, scale=1)
    assert np.all(np.isfinite(w)) and np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------- fuse


def test_average_self_score_is_one():
    pyr = random_pyramid(np.random.default_rng(2))
    assert fuse(similarity_maps(pyr, pyr), None, "average") == pytest.approx(1.0, abs=1e-5)


def test_average_orthogonal_score_is_zero():
    a = np.zeros((3, 3, 4), np.float32)
    b = np.zeros((3, 3, 4), np.float32)
    a[..., 0], b[..., 1] = 1, 1
    maps = similarity_maps(FeaturePyramid((a[:2, :2], a)), FeaturePyramid((b[:2, :2], b)))
    assert fuse(maps, None, "average") == pytest.approx(0.0, abs=1e-5)


def test_average_is_mean_of_scale_means():
    rng = np.random.default_rng(3)
    maps = [rng.normal(size=(4, 4, 3)), rng.normal(size=(8, 8, 3))]
    expected = np.mean([m.sum(axis=-1).mean() for m in maps])
    assert fuse(maps, None, "average") == pytest.approx(expected, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_average_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    maps = [rng.normal(size=(5, 5, 3)), rng.normal(size=(9, 9, 3))]
    shuffled = []
    for m in maps:
        h, w, c = m.shape
        shuffled.append(rng.permutation(m.reshape(-1, c)).reshape(h, w, c))
    assert fuse(shuffled, None, "average") == pytest.approx(fuse(maps, None, "average"), abs=1e-12)


def test_average_init_reproduces_average_score():
    rng = np.random.default_rng(5)
    maps = [rng.uniform(-1, 1, (4, 4, 3)) / 3, rng.uniform(-1, 1, (8, 8, 3)) / 3]
    params = init_params(2, 3, 16, seed=9)
    avg = fuse(maps, None, "average")
    for v in LEARNED:
        assert fuse(maps, params, v) == pytest.approx(avg, abs=1e-12)


def test_learned_fuse_deterministic_and_batched():
    rng = np.random.default_rng(6)
    params, maps, _ = random_instance(rng)
    a, b = fuse(maps, params, "adaptive"), fuse(maps, params, "adaptive")
    assert np.array_equal(a, b)
    for k in range(len(a)):
        assert fuse([m[k] for m in maps], params, "adaptive") == pytest.approx(a[k], abs=1e-12)


def test_fuse_shape_errors():
    params = init_params(2, 3, 16)
    rng = np.random.default_rng(7)
    with pytest.raises(ShapeMismatch):
        fuse([rng.random((4, 4, 3))], params, "adaptive")
    with pytest.raises(ShapeMismatch):
        fuse([rng.random((4, 4, 2)), rng.random((8, 8, 2))], params, "adaptive")
    with pytest.raises(ValueError):
        fuse([rng.random((4, 4, 3))], None, "adaptive")


def test_variant_parse():
    assert Variant.parse("Avg") is Variant.AVERAGE
    assert Variant.parse("SigmoidOnly") is Variant.SIGMOID
    with pytest.raises(ValueError, match="valid variants"):
        Variant.parse("median")


def _outlier_case(rng, n_distractors=5):
    """One true match whose 25% outlier cells are adversarial, plus clean mediocre distractors."""
    h = w = 8
    c = 8
    true = np.zeros((h, w, c))
    true[..., 1:] = 0.8 / 7
    cells = rng.choice(h * w, h * w // 4, replace=False)
    ys, xs = np.unravel_index(cells, (h, w))
    true[ys, xs, 0] = 0.5
    true[ys, xs, 1:] = -1.0 / 7
    distractors = []
    for _ in range(n_distractors):
        d = np.zeros((h, w, c))
        d[..., 1:] = rng.uniform(0.45, 0.55, (h, w, 1)) / 7
        distractors.append(d)
    return true, distractors


def test_constructive_outlier_suppression():
    params = init_params(1, 8, 16)
    # a large negative center tap on channel 0 silences the marked outlier cells
    params.omega_w[0, 1, 1, 0] = -20.0
    for seed in range(10):
        true, distractors = _outlier_case(np.random.default_rng(seed))
        avg_true = fuse([true], None, "average")
        ada_true = fuse([true], params, "adaptive")
        avg_d = [fuse([d], None, "average") for d in distractors]
        ada_d = [fuse([d], params, "adaptive") for d in distractors]
        assert avg_true < max(avg_d)  # average mis-ranks
        assert ada_true > max(ada_d)  # adaptive ranks the true match first


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("variant", LEARNED)
def test_fuse_backward_matches_finite_differences(seed, variant):
    params, maps, upstream = random_instance(np.random.default_rng(seed))
    assert fusion_fd_error(params, maps, upstream, variant) < 1e-3


def test_zero_output_layer_kills_hidden_grads():
    params, maps, upstream = random_instance(np.random.default_rng(10))
    params.w2[:] = 0
    g = fuse_backward(maps, params, upstream)
    for name in ("w1", "b1", "omega_w", "omega_b", "theta_w", "theta_b"):
        assert np.all(getattr(g, name) == 0)
    assert np.any(g.w2 != 0)


def test_zero_upstream_gives_zero_grads():
    params, maps, _ = random_instance(np.random.default_rng(11))
    g = fuse_backward(maps, params, np.zeros(3))
    assert all(np.all(a == 0) for a in g.arrays().values())


def test_unused_conv_gets_zero_grad():
    params, maps, upstream = random_instance(np.random.default_rng(12))
    assert np.all(fuse_backward(maps, params, upstream, "softmax").theta_w == 0)
    assert np.all(fuse_backward(maps, params, upstream, "sigmoid").omega_w == 0)


def test_fuse_with_grad_score_matches_fuse():
    params, maps, upstream = random_instance(np.random.default_rng(13))
    score, backward = fuse_with_grad(maps, params)
    assert np.array_equal(score, fuse(maps, params))
    assert backward(upstream) == fuse_backward(maps, params, upstream)
    with pytest.raises(ValueError):
        fuse_with_grad(maps, params, "average")


# ---------------------------------------------------------------- params file


def test_params_round_trip(tmp_path):
    params = init_params(3, 8, 64, seed=1, mode="random")
    save_params(params, tmp_path / "p.fprm")
    back = load_params(tmp_path / "p.fprm")
    assert back == params
    assert (tmp_path / "p.fprm").read_bytes() == encode_params(back)


def test_params_layout():
    params = init_params(2, 3, 8, seed=2, mode="random")
    data = encode_params(params)
    assert data[:4] == b"FPRM"
    assert struct.unpack_from("<IIII", data, 4) == (1, 2, 3, 8)
    flat = np.frombuffer(data, "<f4", offset=20)
    assert np.array_equal(flat[:27], params.omega_w[0].ravel().astype(np.float32))
    assert flat[27] == np.float32(params.omega_b[0])
    assert flat[-1] == np.float32(params.b2[0])
    assert len(flat) == 2 * 2 * 28 + 8 * 6 + 8 + 8 + 1


def test_params_rejects_shape_and_nonfinite():
    params = init_params(1, 2, 4)
    arrays = params.arrays()
    arrays["w2"] = np.zeros(5)
    with pytest.raises(ShapeMismatch):
        type(params)(**arrays)
    arrays = params.arrays()
    arrays["b1"] = np.full(4, np.nan)
    with pytest.raises(ValueError):
        type(params)(**arrays)


def test_params_decode_errors(tmp_path):
    data = encode_params(init_params(1, 2, 4))
    with pytest.raises(FormatError):
        decode_params(b"XPRM" + data[4:])
    with pytest.raises(FormatError):
        decode_params(data[:-4])
    with pytest.raises(FormatError):
        decode_params(data[:12])
    bumped = bytearray(data)
    struct.pack_into("<I", bumped, 4, 2)
    with pytest.raises(VersionError):
        decode_params(bytes(bumped))
    with pytest.raises(IoError):
        load_params(tmp_path / "none.fprm")


def test_average_init_needs_room():
    with pytest.raises(ValueError):
        init_params(3, 8, 47)
