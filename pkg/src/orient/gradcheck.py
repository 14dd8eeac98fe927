"""Central finite-difference checks for the fusion and loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import Variant, fuse, fuse_backward, init_params
from .nce import Batch, loss, loss_grad

STEP = 1e-4
DENOM_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = DENOM_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def random_instance(rng: np.random.Generator, n_scales: int = 2, channels: int = 4, hidden: int = 8, batch: int = 3):
    """Small random params, similarity maps and upstream gradients."""
    dims = [int(v) for v in np.sort(rng.choice(np.arange(3, 9), n_scales, replace=False))]
    params = init_params(n_scales, channels, hidden, seed=int(rng.integers(2**31)), mode="random", scale=0.5)
    maps = [rng.uniform(-0.5, 1.0, (batch, d, d, channels)) / channels for d in dims]
    upstream = rng.normal(size=batch)
    return params, maps, upstream


def fusion_fd_error(params, maps, upstream, variant=Variant.ADAPTIVE, step: float = STEP) -> float:
    """Largest relative error over every parameter entry."""
    grads = fuse_backward(maps, params, upstream, variant)
    worst = 0.0
    for name, arr in params.arrays().items():
        g = getattr(grads, name)
        numeric = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            plus = float(np.sum(upstream * fuse(maps, params, variant)))
            arr[idx] = old - step
            minus = float(np.sum(upstream * fuse(maps, params, variant)))
            arr[idx] = old
            numeric[idx] = (plus - minus) / (2 * step)
        if variant is Variant.SOFTMAX and name.startswith("theta"):
            continue
        if variant is Variant.SIGMOID and name.startswith("omega"):
            continue
        worst = max(worst, float(rel_error(g, numeric).max()))
    return worst


def loss_fd_error(rng: np.random.Generator, b: int = 4, step: float = STEP) -> float:
    k = 3 * b
    scores = rng.uniform(-1.0, 1.0, (b, k))
    weights = rng.uniform(1e-3, 1.0, (b, k))
    base = Batch(scores, weights)
    analytic = loss_grad(base)
    numeric = np.empty_like(scores)
    for idx in np.ndindex(scores.shape):
        s = scores.copy()
        s[idx] += step
        plus = loss(Batch(s, weights))
        s[idx] -= 2 * step
        minus = loss(Batch(s, weights))
        numeric[idx] = (plus - minus) / (2 * step)
    return float(rel_error(analytic, numeric).max())


@dataclass
class GradcheckReport:
    seeds: list[int]
    fusion_max: dict[str, float]
    loss_max: float

    @property
    def max_rel_err(self) -> float:
        return max(max(self.fusion_max.values()), self.loss_max)


def run_gradcheck(seed: int = 0, instances: int = 1) -> GradcheckReport:
    """Check all learned variants and the loss on ``instances`` random cases derived from ``seed``."""
    seeds = [seed + i for i in range(instances)]
    fusion_max = {v.value: 0.0 for v in Variant if v.learned}
    loss_max = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        params, maps, upstream = random_instance(rng)
        for v in Variant:
            if v.learned:
                fusion_max[v.value] = max(fusion_max[v.value], fusion_fd_error(params, maps, upstream, v))
        loss_max = max(loss_max, loss_fd_error(rng))
    return GradcheckReport(seeds, fusion_max, loss_max)
