"""Local similarity maps and their fusion into one image similarity score.

Similarity maps hold, per scale, the channelwise product of the L2-normalized
source and reference feature vectors at each location, so that summing over
channels gives the local cosine similarity.  Every function here accepts an
optional leading batch axis on the maps (``(..., H, W, C)``), which is how
retrieval scores many references at once.

Parameter layout (``S`` scales, ``C`` channels, hidden width ``D``):

=========  ==============  ===========================================
name       shape           role
=========  ==============  ===========================================
omega_w    (S, 3, 3, C)    3x3 conv producing the softmax logits h(F*)
omega_b    (S,)            its bias
theta_w    (S, 3, 3, C)    3x3 conv producing the gate logits q(F*)
theta_b    (S,)            its bias
w1         (D, S*C)        first head layer (input is scale-major concat)
b1         (D,)
w2         (D,)            output layer
b2         (1,)
=========  ==============  ===========================================
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, IoError, ShapeMismatch, VersionError
from .features import NORM_FLOOR, FeaturePyramid

PARAMS_MAGIC = b"FPRM"
PARAMS_VERSION = 1
DEFAULT_HIDDEN = 64


class Variant(str, enum.Enum):
    ADAPTIVE = "adaptive"
    AVERAGE = "average"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"

    @classmethod
    def parse(cls, name: "str | Variant") -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        aliases = {"avg": "average", "sigmoidonly": "sigmoid", "softmaxonly": "softmax"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown fusion variant {name!r}; valid variants: {valid}") from None

    @property
    def learned(self) -> bool:
        return self is not Variant.AVERAGE


@dataclass(eq=False)
class FusionParams:
    omega_w: np.ndarray
    omega_b: np.ndarray
    theta_w: np.ndarray
    theta_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.array(getattr(self, f.name), dtype=np.float64))
        s, _, _, c = self.omega_w.shape
        d = self.w1.shape[0]
        expected = {
            "omega_w": (s, 3, 3, c),
            "omega_b": (s,),
            "theta_w": (s, 3, 3, c),
            "theta_b": (s,),
            "w1": (d, s * c),
            "b1": (d,),
            "w2": (d,),
            "b2": (1,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_scales(self) -> int:
        return self.omega_w.shape[0]

    @property
    def channels(self) -> int:
        return self.omega_w.shape[3]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    def copy(self) -> "FusionParams":
        return FusionParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "FusionParams":
        return FusionParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def quantized(self) -> "FusionParams":
        """Round every entry to float32, the precision of the params file."""
        return FusionParams(**{k: v.astype(np.float32) for k, v in self.arrays().items()})

    def __eq__(self, other):
        if not isinstance(other, FusionParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))


def init_params(
    n_scales: int,
    channels: int,
    hidden: int = DEFAULT_HIDDEN,
    seed: int = 0,
    mode: str = "average",
    scale: float = 0.1,
) -> FusionParams:
    """Initial fusion parameters.

    ``mode="average"`` builds a head that reproduces the average-fusion score
    exactly with uniform confidence maps (zero convolutions): hidden units
    ``relu(x_k)`` and ``relu(-x_k)`` recombined with weights ``+-1/S``.
    Spare hidden units get small random input weights and a zero output
    weight so they can still be trained.  ``mode="random"`` draws every entry
    from ``N(0, scale^2)``.  Values are float32-representable either way.
    """
    rng = np.random.default_rng(seed)
    sc = n_scales * channels
    conv_shape = (n_scales, 3, 3, channels)
    if mode == "random":
        p = FusionParams(
            omega_w=rng.normal(0, scale, conv_shape),
            omega_b=rng.normal(0, scale, n_scales),
            theta_w=rng.normal(0, scale, conv_shape),
            theta_b=rng.normal(0, scale, n_scales),
            w1=rng.normal(0, scale * 4, (hidden, sc)),
            b1=rng.normal(0, scale, hidden),
            w2=rng.normal(0, scale * 4, hidden),
            b2=rng.normal(0, scale, 1),
        )
        return p.quantized()
    if mode != "average":
        raise ValueError(f"unknown init mode {mode!r}")
    if hidden < 2 * sc:
        raise ValueError(f"average init needs hidden >= {2 * sc}")
    w1 = np.zeros((hidden, sc))
    w1[:sc] = np.eye(sc)
    w1[sc : 2 * sc] = -np.eye(sc)
    w1[2 * sc :] = rng.normal(0, 0.1, (hidden - 2 * sc, sc))
    w2 = np.zeros(hidden)
    w2[:sc] = 1.0 / n_scales
    w2[sc : 2 * sc] = -1.0 / n_scales
    p = FusionParams(
        omega_w=np.zeros(conv_shape),
        omega_b=np.zeros(n_scales),
        theta_w=np.zeros(conv_shape),
        theta_b=np.zeros(n_scales),
        w1=w1,
        b1=np.zeros(hidden),
        w2=w2,
        b2=np.zeros(1),
    )
    return p.quantized()


# ---------------------------------------------------------------- similarity


def unit_vectors(fmap: np.ndarray, dtype=np.float64) -> np.ndarray:
    """L2-normalize along the channel axis; zero vectors stay zero."""
    x = np.asarray(fmap, dtype=dtype)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, NORM_FLOOR)


def similarity_maps(src: FeaturePyramid, ref: FeaturePyramid) -> tuple[np.ndarray, ...]:
    """Channelwise product of normalized features at corresponding locations."""
    if src.scale_dims != ref.scale_dims or src.channels != ref.channels:
        raise ShapeMismatch(
            f"pyramids differ: {src.scale_dims}/c{src.channels} vs {ref.scale_dims}/c{ref.channels}"
        )
    return tuple(unit_vectors(a) * unit_vectors(b) for a, b in zip(src.scales, ref.scales))


# ---------------------------------------------------------------- confidence


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _shift(n: int, d: int) -> tuple[slice, slice]:
    """Output and input slices along one axis for a tap offset ``d`` in {-1, 0, 1}."""
    return slice(max(0, -d), n - max(0, d)), slice(max(0, d), n + min(0, d))


def _apply_taps(taps: np.ndarray, bias: float) -> np.ndarray:
    """Sum the nine shifted tap planes of ``taps`` (..., H, W, 9) into one map."""
    h, w = taps.shape[-3:-1]
    planes = np.ascontiguousarray(np.moveaxis(taps, -1, 0))
    out = np.full(taps.shape[:-1], float(bias))
    for k in range(9):
        dy, dx = divmod(k, 3)
        oy, iy = _shift(h, dy - 1)
        ox, ix = _shift(w, dx - 1)
        out[..., oy, ox] += planes[k][..., iy, ix]
    return out


def conv3x3(fmap: np.ndarray, weight: np.ndarray, bias: float) -> np.ndarray:
    """Zero-padded 3x3 convolution from C channels to one, on ``(..., H, W, C)``."""
    return _apply_taps(fmap @ weight.reshape(9, -1).T, bias)


def _conv3x3_weight_grad(fmap: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, float]:
    h, w, c = fmap.shape[-3:]
    g = grad_out.reshape(-1, h, w)
    # shifted copies of the output gradient, aligned with the input map
    shifted = np.zeros((9,) + g.shape)
    for k in range(9):
        dy, dx = divmod(k, 3)
        oy, iy = _shift(h, dy - 1)
        ox, ix = _shift(w, dx - 1)
        shifted[k][:, iy, ix] = g[:, oy, ox]
    gw = shifted.reshape(9, -1) @ fmap.reshape(-1, c)
    return gw.reshape(3, 3, c), float(grad_out.sum())


def _softmax_spatial(logits: np.ndarray) -> np.ndarray:
    flat = logits.reshape(logits.shape[:-2] + (-1,))
    flat = np.exp(flat - flat.max(axis=-1, keepdims=True))
    flat /= flat.sum(axis=-1, keepdims=True)
    return flat.reshape(logits.shape)


def _weight_logits(f_star, params, scale, variant):
    """Log of the unnormalized confidence map plus cached conv outputs."""
    a = q = None
    if variant is Variant.ADAPTIVE:
        # one matmul for both convolutions
        stacked = np.concatenate([params.omega_w[scale].reshape(9, -1), params.theta_w[scale].reshape(9, -1)])
        taps = f_star @ stacked.T
        a = _apply_taps(taps[..., :9], params.omega_b[scale])
        q = _apply_taps(taps[..., 9:], params.theta_b[scale])
    elif variant is Variant.SOFTMAX:
        a = conv3x3(f_star, params.omega_w[scale], params.omega_b[scale])
    elif variant is Variant.SIGMOID:
        q = conv3x3(f_star, params.theta_w[scale], params.theta_b[scale])
    if variant is Variant.ADAPTIVE:
        logits = a + _log_sigmoid(q)
    elif variant is Variant.SOFTMAX:
        logits = a
    elif variant is Variant.SIGMOID:
        logits = _log_sigmoid(q)
    else:
        logits = np.zeros(f_star.shape[:-1])
    return logits, a, q


def confidence_map(
    f_star: np.ndarray, params: FusionParams | None, variant: "Variant | str" = Variant.ADAPTIVE, scale: int = 0
) -> np.ndarray:
    """Spatial confidence weights for one scale; nonnegative and summing to one.

    Adaptive: ``exp(h) * sigmoid(q)`` normalized.  Sigmoid: ``sigmoid(q)``
    normalized.  Softmax: softmax of ``h``.  Average: uniform.  Computed in
    the log domain so extreme logits neither overflow nor underflow.
    """
    variant = Variant.parse(variant)
    f_star = np.asarray(f_star, dtype=np.float64)
    if variant is Variant.AVERAGE:
        h, w = f_star.shape[-3:-1]
        return np.full(f_star.shape[:-1], 1.0 / (h * w))
    logits, _, _ = _weight_logits(f_star, params, scale, variant)
    return _softmax_spatial(logits)


# ---------------------------------------------------------------- fusion


def _check_maps(maps: Sequence[np.ndarray], params: FusionParams | None):
    if params is None:
        return
    if len(maps) != params.n_scales:
        raise ShapeMismatch(f"{len(maps)} similarity scales but params expect {params.n_scales}")
    for m in maps:
        if m.shape[-1] != params.channels:
            raise ShapeMismatch(f"similarity maps have {m.shape[-1]} channels, params expect {params.channels}")


def _forward(maps, params, variant):
    cache = []
    pooled = []
    for i, f_star in enumerate(maps):
        logits, a, q = _weight_logits(f_star, params, i, variant)
        w = _softmax_spatial(logits)
        v = np.einsum("...yx,...yxc->...c", w, f_star)
        pooled.append(v)
        cache.append((w, q))
    x = np.concatenate(pooled, axis=-1)
    z1 = x @ params.w1.T + params.b1
    h1 = np.maximum(z1, 0.0)
    score = h1 @ params.w2 + params.b2[0]
    return score, (x, z1, h1, cache)


def fuse(maps: Sequence[np.ndarray], params: FusionParams | None, variant: "Variant | str" = Variant.ADAPTIVE):
    """Fused similarity score (a float, or an array for batched maps).

    The average variant ignores ``params`` and returns the mean over scales of
    the mean local cosine similarity.
    """
    variant = Variant.parse(variant)
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if variant is Variant.AVERAGE:
        per_scale = [m.sum(axis=-1).mean(axis=(-2, -1)) for m in maps]
        score = np.mean(per_scale, axis=0)
    else:
        if params is None:
            raise ValueError(f"variant {variant.value!r} needs fusion parameters")
        _check_maps(maps, params)
        score, _ = _forward(maps, params, variant)
    return float(score) if np.ndim(score) == 0 else score


def fuse_backward(
    maps: Sequence[np.ndarray],
    params: FusionParams,
    upstream,
    variant: "Variant | str" = Variant.ADAPTIVE,
) -> FusionParams:
    """Gradient of ``sum(upstream * fuse(maps))`` with respect to every parameter.

    ``upstream`` is a scalar, or one value per batch item for batched maps.
    The maps are treated as constants.  Entries a variant does not use (the
    gate conv for softmax-only, the logit conv for sigmoid-only) get zero
    gradient.
    """
    _, backward = fuse_with_grad(maps, params, variant)
    return backward(upstream)


def fuse_with_grad(maps: Sequence[np.ndarray], params: FusionParams, variant: "Variant | str" = Variant.ADAPTIVE):
    """Scores plus a function mapping upstream gradients to parameter gradients.

    Shares one forward pass between the loss and its gradient.
    """
    variant = Variant.parse(variant)
    if not variant.learned:
        raise ValueError("the average variant has no trainable parameters")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    _check_maps(maps, params)
    score, (x, z1, h1, cache) = _forward(maps, params, variant)

    def backward(upstream) -> FusionParams:
        g = np.broadcast_to(np.asarray(upstream, dtype=np.float64), np.shape(score))
        grads = params.zeros_like()
        grads.b2[0] = g.sum()
        grads.w2[:] = np.tensordot(g, h1, axes=g.ndim)
        dz1 = g[..., None] * params.w2 * (z1 > 0)
        grads.w1[:] = np.tensordot(dz1, x, axes=(list(range(g.ndim)), list(range(g.ndim))))
        grads.b1[:] = dz1.reshape(-1, params.hidden).sum(axis=0)
        dx = dz1 @ params.w1

        c = params.channels
        for i, f_star in enumerate(maps):
            w, q = cache[i]
            dv = dx[..., i * c : (i + 1) * c]
            dw = np.einsum("...c,...yxc->...yx", dv, f_star)
            inner = np.sum(dw * w, axis=(-2, -1), keepdims=True)
            dlogit = w * (dw - inner)
            if variant in (Variant.ADAPTIVE, Variant.SOFTMAX):
                grads.omega_w[i], grads.omega_b[i] = _conv3x3_weight_grad(f_star, dlogit)
            if variant in (Variant.ADAPTIVE, Variant.SIGMOID):
                dq = dlogit * (1.0 - _sigmoid(q))
                grads.theta_w[i], grads.theta_b[i] = _conv3x3_weight_grad(f_star, dq)
        return grads

    return (float(score) if np.ndim(score) == 0 else score), backward


# ---------------------------------------------------------------- persistence


def encode_params(params: FusionParams) -> bytes:
    s, c, d = params.n_scales, params.channels, params.hidden
    parts = [PARAMS_MAGIC, struct.pack("<IIII", PARAMS_VERSION, s, c, d)]

    def f32(a):
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())

    for i in range(s):
        f32(params.omega_w[i])
        f32(params.omega_b[i : i + 1])
    for i in range(s):
        f32(params.theta_w[i])
        f32(params.theta_b[i : i + 1])
    f32(params.w1)
    f32(params.b1)
    f32(params.w2)
    f32(params.b2)
    return b"".join(parts)


def decode_params(data: bytes) -> FusionParams:
    if len(data) < 4 or data[:4] != PARAMS_MAGIC:
        raise FormatError("not a fusion params file (bad magic)")
    if len(data) < 20:
        raise FormatError("truncated params header")
    version, s, c, d = struct.unpack_from("<IIII", data, 4)
    if version != PARAMS_VERSION:
        raise VersionError(f"params version {version} unsupported (supported: {PARAMS_VERSION})")
    total = s * 2 * (9 * c + 1) + d * s * c + d + d + 1
    if len(data) != 20 + 4 * total:
        raise FormatError(f"params payload has {len(data) - 20} bytes, expected {4 * total}")
    flat = np.frombuffer(data, dtype="<f4", offset=20).astype(np.float64)
    pos = 0

    def take(n, shape):
        nonlocal pos
        out = flat[pos : pos + n].reshape(shape)
        pos += n
        return out

    omega_w, omega_b, theta_w, theta_b = [], [], [], []
    for _ in range(s):
        omega_w.append(take(9 * c, (3, 3, c)))
        omega_b.append(take(1, ()))
    for _ in range(s):
        theta_w.append(take(9 * c, (3, 3, c)))
        theta_b.append(take(1, ()))
    return FusionParams(
        omega_w=np.array(omega_w).reshape(s, 3, 3, c),
        omega_b=np.array(omega_b).reshape(s),
        theta_w=np.array(theta_w).reshape(s, 3, 3, c),
        theta_b=np.array(theta_b).reshape(s),
        w1=take(d * s * c, (d, s * c)),
        b1=take(d, (d,)),
        w2=take(d, (d,)),
        b2=take(1, (1,)),
    )


def save_params(params: FusionParams, path) -> None:
    try:
        Path(path).write_bytes(encode_params(params))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> FusionParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_params(data)
