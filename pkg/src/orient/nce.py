"""Rotation-weighted infoNCE loss and a plain gradient-descent fitter for the fusion head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import so3
from .errors import NonFiniteLoss
from .features import FeaturePyramid
from .fusion import FusionParams, Variant, fuse, fuse_with_grad, similarity_maps

log = logging.getLogger(__name__)

TEMPERATURE = 0.1
W_FLOOR = 1e-3


def pair_weight(ri, rj, ci: Hashable, cj: Hashable, w_floor: float = W_FLOOR) -> float:
    """Normalized rotation distance for same-category pairs (floored), 1 otherwise."""
    if ci != cj:
        return 1.0
    return max(so3.geodesic_distance(ri, rj), w_floor)


@dataclass
class Batch:
    """Scores of ``B`` anchors against ``K`` candidates each (``K = 3B`` in training).

    ``weights`` has the same shape as ``scores``; ``positive[i]`` is the
    column holding anchor ``i``'s positive pair.
    """

    scores: np.ndarray
    weights: np.ndarray | None = None
    positive: np.ndarray | None = None
    tau: float = TEMPERATURE

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if self.weights is None:
            self.weights = np.ones_like(self.scores)
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=np.float64), self.scores.shape)
        if self.positive is None:
            self.positive = np.zeros(self.scores.shape[0], dtype=int)
        self.positive = np.asarray(self.positive, dtype=int).reshape(self.scores.shape[0])
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    @property
    def size(self) -> int:
        return self.scores.shape[0]


def _log_softmax(batch: Batch) -> np.ndarray:
    z = batch.scores / batch.tau + np.log(batch.weights)
    m = z.max(axis=1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))


def per_anchor_loss(batch: Batch) -> np.ndarray:
    logp = _log_softmax(batch)
    return -logp[np.arange(batch.size), batch.positive]


def loss(batch: Batch) -> float:
    """Mean over anchors of ``-log(exp(s_pos/tau) w_pos / sum_k exp(s_k/tau) w_k)``."""
    return float(per_anchor_loss(batch).mean())


def loss_grad(batch: Batch) -> np.ndarray:
    """Gradient of :func:`loss` with respect to every score, shape ``(B, K)``."""
    p = np.exp(_log_softmax(batch))
    p[np.arange(batch.size), batch.positive] -= 1.0
    return p / (batch.tau * batch.size)


# ---------------------------------------------------------------- fitting


@dataclass
class TrainSample:
    """One anchor image and its scored candidates; ``candidates[0]`` is the positive."""

    src: FeaturePyramid
    src_rotation: np.ndarray
    src_category: Hashable
    candidates: Sequence[FeaturePyramid]
    cand_rotations: np.ndarray
    cand_categories: Sequence[Hashable]


@dataclass
class FitConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    tau: float = TEMPERATURE
    w_floor: float = W_FLOOR
    weighted: bool = True
    variant: Variant = Variant.ADAPTIVE
    share_conv: bool = False
    target_loss: float | None = None  # stop once an epoch's mean loss is at or below this

    def __post_init__(self):
        if not self.lr >= 0:  # zero is allowed as a no-op fit
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.variant = Variant.parse(self.variant)
        if not self.variant.learned:
            raise ValueError("the average variant has nothing to fit")


@dataclass
class FitResult:
    params: FusionParams
    history: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")

    def history_csv(self) -> str:
        lines = ["epoch,mean_loss"]
        lines += [f"{i + 1},{v:.10g}" for i, v in enumerate(self.history)]
        return "\n".join(lines) + "\n"


def _prepare(train_set: Sequence[TrainSample], cfg: FitConfig):
    maps, weights = [], []
    for sample in train_set:
        per = [similarity_maps(sample.src, c) for c in sample.candidates]
        maps.append(tuple(np.stack(s) for s in zip(*per)))
        if cfg.weighted:
            w = [
                pair_weight(sample.src_rotation, r, sample.src_category, c, cfg.w_floor)
                for r, c in zip(sample.cand_rotations, sample.cand_categories)
            ]
        else:
            w = np.ones(len(sample.candidates))
        weights.append(np.asarray(w))
    k = {len(w) for w in weights}
    if len(k) != 1:
        raise ValueError("every training sample needs the same number of candidates")
    return maps, np.stack(weights)


def _batch_maps(maps, idx):
    return tuple(np.concatenate([maps[i][s] for i in idx]) for s in range(len(maps[0])))


def _minibatch(maps, weights, idx, params, cfg):
    stacked = _batch_maps(maps, idx)
    k = weights.shape[1]
    scores = np.asarray(fuse(stacked, params, cfg.variant)).reshape(len(idx), k)
    return stacked, Batch(scores, weights[idx], tau=cfg.tau)


def mean_loss(train_set_maps, weights, params, cfg: FitConfig) -> float:
    n = len(train_set_maps)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, n))
        _, batch = _minibatch(train_set_maps, weights, idx, params, cfg)
        total += per_anchor_loss(batch).sum()
    return total / n


def fit_fusion(train_set: Sequence[TrainSample], cfg: FitConfig, init: FusionParams) -> FitResult:
    """Mini-batch gradient descent on the learned fusion parameters.

    Each epoch visits the samples in a seeded random order.  The recorded
    epoch loss is the mean anchor loss seen while iterating that epoch.  The
    returned parameters are rounded to float32 so that they persist exactly.
    """
    if not train_set:
        raise ValueError("training set is empty")
    maps, weights = _prepare(train_set, cfg)
    params = init.copy()
    rng = np.random.default_rng(cfg.seed)
    result = FitResult(params=params, initial_loss=mean_loss(maps, weights, params, cfg))
    n = len(maps)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            stacked = _batch_maps(maps, idx)
            scores, backward = fuse_with_grad(stacked, params, cfg.variant)
            batch = Batch(np.reshape(scores, (len(idx), -1)), weights[idx], tau=cfg.tau)
            anchor_losses = per_anchor_loss(batch)
            if not np.all(np.isfinite(anchor_losses)):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            total += anchor_losses.sum()
            grads = backward(loss_grad(batch).ravel())
            if cfg.share_conv:
                for name in ("omega_w", "omega_b", "theta_w", "theta_b"):
                    g = getattr(grads, name)
                    g[...] = g.sum(axis=0, keepdims=True)
            for name, arr in params.arrays().items():
                arr -= cfg.lr * getattr(grads, name)
        result.history.append(total / n)
        log.debug("epoch %d mean loss %.6f", epoch + 1, result.history[-1])
        if cfg.target_loss is not None and result.history[-1] <= cfg.target_loss:
            break
    result.params = params.quantized()
    return result
