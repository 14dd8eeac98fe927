"""Query answering: exhaustive search, anchor-based category recognition and coarse-to-fine retrieval."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import so3
from .errors import ShapeMismatch
from .features import FeaturePyramid
from .fusion import FusionParams, Variant, fuse, unit_vectors
from .refdb import ReferenceDB

CHUNK = 1024


class Scorer(Protocol):
    comparisons: int

    def score(self, obj: int, ref_ids: np.ndarray) -> np.ndarray: ...


class FusionScorer:
    """Scores a query against references with :func:`orient.fusion.fuse`, counting evaluations."""

    def __init__(self, query: FeaturePyramid, db: ReferenceDB, params: FusionParams | None, variant="adaptive"):
        if query.scale_dims != db.config.scale_dims or query.channels != db.config.channels:
            raise ShapeMismatch(f"query is {query.config.fingerprint}, database is {db.fingerprint}")
        self.variant = Variant.parse(variant)
        if self.variant.learned and params is None:
            raise ValueError(f"variant {self.variant.value!r} needs fusion parameters")
        self.db = db
        self.params = params
        self.query_units = tuple(unit_vectors(m, np.float32) for m in query.scales)
        self.comparisons = 0

    def score(self, obj: int, ref_ids) -> np.ndarray:
        ref_ids = np.asarray(ref_ids, dtype=int)
        units = self.db.objects[obj].unit_maps
        out = np.empty(len(ref_ids))
        for start in range(0, len(ref_ids), CHUNK):
            ids = ref_ids[start : start + CHUNK]
            maps = [q[None] * u[ids] for q, u in zip(self.query_units, units)]
            out[start : start + len(ids)] = fuse(maps, self.params, self.variant)
        self.comparisons += len(ref_ids)
        return out


@dataclass
class RetrievalResult:
    category: str
    object_index: int
    ref_index: int
    rotation: np.ndarray
    score: float
    comparisons: int
    elapsed: float
    iterations: int = 0
    best_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "object_index": self.object_index,
            "ref_index": self.ref_index,
            "rotation": np.asarray(self.rotation).tolist(),
            "score": self.score,
            "comparisons": self.comparisons,
            "elapsed_s": self.elapsed,
            "iterations": self.iterations,
        }


@dataclass
class CategoryResult:
    category: str
    object_index: int
    anchor_id: int
    anchor_scores: list[np.ndarray]
    comparisons: int


@dataclass(frozen=True)
class FastConfig:
    k_local: int = 32
    max_iters: int | None = None  # None: ceil(log2 R)

    def __post_init__(self):
        if self.k_local < 2:
            raise ValueError("k_local must be >= 2")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def _scorer(query, db, params, variant, scorer):
    return scorer if scorer is not None else FusionScorer(query, db, params, variant)


def _best(ids: np.ndarray, scores: np.ndarray) -> int:
    """Position of the highest score; ties go to the lowest reference id."""
    top = scores.max()
    return int(np.flatnonzero(scores == top)[np.argmin(ids[scores == top])])


def greedy_search(query, db: ReferenceDB, params=None, variant="adaptive", *, scorer: Scorer | None = None):
    """Score every reference of every object and return the global best."""
    t0 = time.perf_counter()
    sc = _scorer(query, db, params, variant, scorer)
    start = sc.comparisons
    best = None
    for o, obj in enumerate(db.objects):
        scores = sc.score(o, np.arange(obj.size))
        i = int(np.argmax(scores))  # first maximum: lowest index
        if best is None or scores[i] > best[2]:
            best = (o, i, float(scores[i]))
    o, i, s = best
    obj = db.objects[o]
    return RetrievalResult(
        obj.category, o, i, obj.rotations[i].copy(), s, sc.comparisons - start, time.perf_counter() - t0
    )


def recognize_category(query, db: ReferenceDB, params=None, variant="adaptive", *, scorer: Scorer | None = None):
    """Score the precomputed anchors of every object; the best anchor's object wins."""
    sc = _scorer(query, db, params, variant, scorer)
    start = sc.comparisons
    per_object = []
    best = None
    for o, obj in enumerate(db.objects):
        ids = np.asarray(obj.anchor_ids)
        scores = sc.score(o, ids)
        per_object.append(scores)
        pos = _best(ids, scores)
        if best is None or scores[pos] > best[2]:
            best = (o, int(ids[pos]), float(scores[pos]))
    o, anchor, _ = best
    return CategoryResult(db.objects[o].category, o, anchor, per_object, sc.comparisons - start)


def fast_retrieve(
    query,
    db: ReferenceDB,
    params=None,
    variant="adaptive",
    cfg: FastConfig = FastConfig(),
    *,
    scorer: Scorer | None = None,
) -> RetrievalResult:
    """Anchor-initialized coarse-to-fine search within the recognized object.

    Iteration ``j`` looks at the ``floor(R / 2**j)`` references nearest (by
    geodesic distance, ties by index) to the current estimate, scores up to
    ``k_local`` of them chosen by FPS seeded at the nearest one, and moves the
    estimate to the best reference scored so far.  Scores are cached per
    query so no reference is evaluated twice.  The loop stops after the
    search space has been scored exhaustively and either was smaller than
    ``k_local`` or left the estimate unchanged, or after ``max_iters``.
    """
    t0 = time.perf_counter()
    sc = _scorer(query, db, params, variant, scorer)
    start = sc.comparisons
    cat = recognize_category(query, db, params, variant, scorer=sc)
    o = cat.object_index
    obj = db.objects[o]
    n = obj.size
    rots = obj.rotations
    cache = dict(zip(obj.anchor_ids, cat.anchor_scores[o].tolist()))

    def current_best() -> int:
        ids = np.fromiter(cache.keys(), dtype=int, count=len(cache))
        vals = np.fromiter(cache.values(), dtype=float, count=len(cache))
        return int(ids[_best(ids, vals)])

    best = current_best()
    history = [cache[best]]
    max_iters = cfg.max_iters if cfg.max_iters is not None else max(1, math.ceil(math.log2(n)))
    iterations = 0
    order_tiebreak = np.arange(n)
    for j in range(1, max_iters + 1):
        size = n >> j
        if size == 0:
            break
        dist = so3.geodesic_to_many(rots[best], rots)
        space = np.lexsort((order_tiebreak, dist))[:size]
        picked = space[so3.fps_select(rots[space], min(cfg.k_local, size), start=0)]
        fresh = np.array([i for i in picked if int(i) not in cache], dtype=int)
        if fresh.size:
            cache.update(zip(fresh.tolist(), sc.score(o, fresh).tolist()))
        previous, best = best, current_best()
        history.append(cache[best])
        iterations += 1
        exhaustive = size <= cfg.k_local
        if size < cfg.k_local or (exhaustive and best == previous):
            break
    return RetrievalResult(
        obj.category,
        o,
        best,
        rots[best].copy(),
        cache[best],
        sc.comparisons - start,
        time.perf_counter() - t0,
        iterations,
        history,
    )
