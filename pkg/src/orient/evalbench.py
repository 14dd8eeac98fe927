"""Metrics, synthetic retrieval tasks and accuracy/latency benchmarks.

Synthetic objects are clouds of Gaussian blobs in 3D.  A reference is the
orthographic rendering of the cloud under a rotation, passed through the
same normalization and feature extraction as any other image, so features
vary smoothly with rotation.  Queries are re-rendered at perturbed rotations
with feature noise, a shading ramp, and a patch of locations overwritten by
features of a striped background image.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import so3
from .errors import EmptyEval
from .features import ExtractorConfig, FeaturePyramid, extract_batch
from .fusion import FusionParams, Variant, init_params
from .nce import FitConfig, FitResult, TrainSample, fit_fusion
from .preproc import IMAGE_SIZE, NormConfig, local_normalize
from .refdb import ObjectSource, ReferenceDB, build
from .retrieval import FastConfig, RetrievalResult, fast_retrieve, greedy_search

DEFAULT_THRESHOLD_DEG = 30.0
SYNTH_SCALES = ((4, 4), (8, 8), (16, 16))


# ---------------------------------------------------------------- metrics


@dataclass
class EvalRecord:
    query_id: int
    true_category: str
    true_rotation: np.ndarray
    pred_category: str
    pred_rotation: np.ndarray
    error: float
    comparisons: int
    elapsed: float
    ref_index: int = -1

    def __post_init__(self):
        if not 0.0 <= self.error <= 1.0:
            raise ValueError(f"geodesic error {self.error} outside [0, 1]")


def class_acc(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise EmptyEval("no records to evaluate")
    return sum(r.pred_category == r.true_category for r in records) / len(records)


def rota_acc(records: Sequence[EvalRecord], threshold_deg: float = DEFAULT_THRESHOLD_DEG) -> float:
    """Fraction with the right category and a normalized error below ``threshold_deg / 180``."""
    if not records:
        raise EmptyEval("no records to evaluate")
    limit = threshold_deg / 180.0
    return sum(r.pred_category == r.true_category and r.error < limit for r in records) / len(records)


# ---------------------------------------------------------------- synthetic task


@dataclass(frozen=True)
class SynthTask:
    seed: int = 0
    n_objects: int = 4
    n_refs: int = 2000
    n_queries: int = 200
    noise: float = 0.0
    perturb_deg: float = 0.0
    illumination: float = 0.0
    outlier_fraction: float = 0.0
    fresh_rotations: bool = False
    local_norm: bool = True
    k_ac: int = 128
    scale_dims: tuple[tuple[int, int], ...] = SYNTH_SCALES
    channels: int = 8
    blobs: int = 12
    blob_sigma: tuple[float, float] = (0.2, 0.4)

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.noise < 0 or self.perturb_deg < 0 or self.illumination < 0:
            raise ValueError("noise levels must be non-negative")
        object.__setattr__(self, "scale_dims", tuple(tuple(int(v) for v in d) for d in self.scale_dims))
        object.__setattr__(self, "blob_sigma", tuple(float(v) for v in self.blob_sigma))

    @property
    def noiseless(self) -> bool:
        return self.noise == 0 and self.perturb_deg == 0 and self.illumination == 0 and self.outlier_fraction == 0

    @property
    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(self.scale_dims, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTask":
        d = dict(d)
        d["scale_dims"] = tuple(tuple(x) for x in d.get("scale_dims", SYNTH_SCALES))
        if "blob_sigma" in d:
            d["blob_sigma"] = tuple(d["blob_sigma"])
        return cls(**d)


def standard_task(**overrides) -> SynthTask:
    """Moderately noisy task: N = 4, R = 2000, perturbed and re-lit queries."""
    base = dict(seed=0, n_objects=4, n_refs=2000, n_queries=200, noise=0.05, perturb_deg=10.0, illumination=0.3,
                k_ac=256)
    base.update(overrides)
    return SynthTask(**base)


def outlier_task(**overrides) -> SynthTask:
    """Heavier noise plus 25% of every scale's locations replaced by striped background."""
    base = dict(seed=0, n_objects=4, n_refs=500, n_queries=200, noise=0.15, perturb_deg=15.0,
                illumination=0.3, outlier_fraction=0.25, k_ac=64)
    base.update(overrides)
    return SynthTask(**base)


def noiseless_task(**overrides) -> SynthTask:
    base = dict(seed=0, n_objects=4, n_refs=2000, n_queries=200)
    base.update(overrides)
    return SynthTask(**base)


def _subseed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# stream tags for independent random streams
_OBJ, _REFS, _QUERY, _TRAIN, _CLUTTER = 1, 2, 3, 4, 5
_PIXELS = np.arange(IMAGE_SIZE, dtype=np.float64)
_HALF = IMAGE_SIZE / 2
_SPREAD = 0.375 * IMAGE_SIZE


@dataclass(frozen=True)
class BlobObject:
    points: np.ndarray
    sigmas: np.ndarray
    amps: np.ndarray

    @classmethod
    def random(cls, seed: int, blobs: int = 12, sigma: tuple[float, float] = (0.2, 0.4)) -> "BlobObject":
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(blobs, 3))
        pts *= (0.75 * rng.uniform(0.3, 1.0, blobs) / np.linalg.norm(pts, axis=1))[:, None]
        sig = rng.uniform(sigma[0], sigma[1], blobs)
        amp = rng.uniform(0.4, 1.0, blobs) * rng.choice([-1.0, 1.0], blobs, p=[0.3, 0.7])
        return cls(pts, sig, amp)

    def render(self, rotations: np.ndarray) -> np.ndarray:
        """Orthographic Gaussian-splat images ``(n, 128, 128)``, brightness shaded by depth."""
        rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        p = np.einsum("nij,kj->nki", rotations, self.points)
        return _splat(_HALF + _SPREAD * p[..., 0], _HALF - _SPREAD * p[..., 1],
                      np.broadcast_to(_SPREAD * self.sigmas, p.shape[:2]), self.amps * (1.0 + 0.5 * p[..., 2]))


def _splat(u, v, s, a):
    gx = np.exp(-((_PIXELS - u[..., None]) ** 2) / (2.0 * s[..., None] ** 2))
    gy = np.exp(-((_PIXELS - v[..., None]) ** 2) / (2.0 * s[..., None] ** 2))
    return np.einsum("nk,nky,nkx->nyx", a, gy, gx)


def render_background(rng: np.random.Generator, n: int = 1, tilt_deg: float = 10.0) -> np.ndarray:
    """Structured background: near-horizontal gratings with random frequency and phase.

    Their gradient histograms concentrate in the bins around 90 degrees, so
    overwriting query cells with them biases plain cosine averaging toward
    references with strong horizontal edges at those cells.
    """
    theta = np.deg2rad(rng.uniform(-tilt_deg, tilt_deg, n))
    freq = rng.uniform(1.0 / 16.0, 1.0 / 6.0, n)
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    yy, xx = np.meshgrid(_PIXELS, _PIXELS, indexing="ij")
    coord = np.cos(theta)[:, None, None] * yy - np.sin(theta)[:, None, None] * xx
    return np.sin(2.0 * np.pi * freq[:, None, None] * coord + phase[:, None, None])


def _illumination(rng: np.random.Generator, strength: float) -> tuple[np.ndarray, float]:
    """Random multiplicative shading field (gain times a linear ramp) and an offset."""
    gain = np.exp(rng.uniform(-strength, strength))
    offset = rng.uniform(-strength, strength)
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    yy, xx = np.meshgrid(_PIXELS - _HALF, _PIXELS - _HALF, indexing="ij")
    ramp = strength * (direction[0] * yy + direction[1] * xx) / _HALF
    return gain * (1.0 + ramp), offset


def pipeline(images: np.ndarray, task: SynthTask) -> list[np.ndarray]:
    imgs = np.asarray(images, dtype=np.float64)
    if task.local_norm:
        imgs = local_normalize(imgs, NormConfig())
    return extract_batch(imgs, task.extractor)


def outlier_locations(h: int, w: int, fraction: float, center: tuple[float, float]) -> np.ndarray:
    """The ``floor(fraction * h * w)`` cells nearest a normalized center (row-major tie-break)."""
    count = int(np.floor(fraction * h * w))
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    d = (cy[:, None] - center[0]) ** 2 + (cx[None, :] - center[1]) ** 2
    order = np.lexsort((np.arange(h * w), d.ravel()))
    return order[:count]


@dataclass
class Query:
    query_id: int
    object_index: int
    category: str
    rotation: np.ndarray
    pyramid: FeaturePyramid
    source_ref: int = -1
    outlier_cells: tuple[np.ndarray, ...] = ()


@dataclass
class SynthData:
    task: SynthTask
    objects: list[BlobObject]
    sources: list[ObjectSource]
    queries: list[Query]
    _db: ReferenceDB | None = field(default=None, repr=False)

    @property
    def categories(self) -> list[str]:
        return [s.category for s in self.sources]

    def db(self) -> ReferenceDB:
        if self._db is None:
            self._db = build(self.sources, self.task.k_ac)
        return self._db


def _render_refs(obj: BlobObject, rotations: np.ndarray, task: SynthTask, chunk: int = 250) -> list[np.ndarray]:
    parts = [pipeline(obj.render(rotations[i : i + chunk]), task) for i in range(0, len(rotations), chunk)]
    return [np.concatenate([p[s] for p in parts]) for s in range(len(task.scale_dims))]


def make_observations(
    task: SynthTask,
    objects: Sequence[BlobObject],
    sources: Sequence[ObjectSource],
    n: int,
    stream: int,
) -> list[Query]:
    """Labeled query observations drawn with the task's noise model."""
    rng = np.random.default_rng(_subseed(task.seed, stream))
    out = []
    for qid in range(n):
        o = int(rng.integers(len(sources)))
        src = sources[o]
        ref = int(rng.integers(len(src.rotations)))
        if task.fresh_rotations:
            rot = so3.sample_rotations(1, _subseed(task.seed, stream, qid))[0]
            ref = -1
        else:
            rot = src.rotations[ref]
        if task.noiseless and not task.fresh_rotations:
            pyr = FeaturePyramid(tuple(m[ref] for m in src.maps))
            out.append(Query(qid, o, src.category, rot.copy(), pyr, ref))
            continue
        if task.perturb_deg > 0:
            axis = rng.normal(size=3)
            angle = np.deg2rad(rng.uniform(0.0, task.perturb_deg))
            rot = rot @ so3.rot_axis_angle(axis, angle)
        img = objects[o].render(rot)[0]
        if task.illumination > 0:
            shading, offset = _illumination(rng, task.illumination)
            img = img * shading + offset
        maps = [m[0].astype(np.float64) for m in pipeline(img[None], task)]
        if task.noise > 0:
            maps = [m + rng.normal(0.0, task.noise, m.shape) for m in maps]
        cells = ()
        if task.outlier_fraction > 0:
            clutter = [m[0] for m in pipeline(render_background(rng), task)]
            center = tuple(rng.uniform(0.25, 0.75, 2))
            cells = []
            for m, c in zip(maps, clutter):
                h, w, ch = m.shape
                idx = outlier_locations(h, w, task.outlier_fraction, center)
                flat = m.reshape(h * w, ch)
                flat[idx] = c.reshape(h * w, ch)[idx]
                cells.append(idx)
            cells = tuple(cells)
        out.append(Query(qid, o, src.category, rot, FeaturePyramid(tuple(maps)), ref, cells))
    return out


@lru_cache(maxsize=8)
def gen_task(task: SynthTask) -> SynthData:
    """Render references and queries for ``task``; deterministic in ``task.seed``.

    Results are cached per task, so treat the returned data as read-only.
    """
    objects = [BlobObject.random(_subseed(task.seed, _OBJ, o), task.blobs, task.blob_sigma) for o in range(task.n_objects)]
    sources = []
    for o, obj in enumerate(objects):
        rots = so3.sample_rotations(task.n_refs, _subseed(task.seed, _REFS, o))
        sources.append(ObjectSource(f"obj{o:02d}", rots, maps=_render_refs(obj, rots, task)))
    queries = make_observations(task, objects, sources, task.n_queries, _QUERY)
    return SynthData(task, objects, sources, queries)


def subset_sources(sources: Sequence[ObjectSource], n_refs: int) -> list[ObjectSource]:
    """The first ``n_refs`` references of every object (reference sets are nested in R)."""
    return [ObjectSource(s.category, s.rotations[:n_refs], maps=[m[:n_refs] for m in s.maps]) for s in sources]


def make_training_set(data: SynthData, n_anchors: int = 64, batch_size: int = 16) -> list[TrainSample]:
    """Contrastive training samples, ``3 * batch_size`` candidates each.

    Anchors are fresh noisy observations.  Each is paired with its closest
    reference (the positive) and a random reference; within a group of
    ``batch_size`` anchors the candidates of anchor ``i`` are its positive,
    the other positives, every random sample, the other anchors, and one
    extra random reference of its own object.
    """
    if n_anchors % batch_size:
        raise ValueError("n_anchors must be a multiple of batch_size")
    task = data.task
    anchors = make_observations(task, data.objects, data.sources, n_anchors, _TRAIN)
    rng = np.random.default_rng(_subseed(task.seed, _TRAIN, 1))

    def ref(o, i):
        s = data.sources[o]
        return FeaturePyramid(tuple(m[i] for m in s.maps)), s.rotations[i], s.category

    items = []
    for a in anchors:
        src = data.sources[a.object_index]
        pos = int(np.argmin(so3.geodesic_to_many(a.rotation, src.rotations)))
        ro = int(rng.integers(len(data.sources)))
        rand = ref(ro, int(rng.integers(len(data.sources[ro].rotations))))
        extra = ref(a.object_index, int(rng.integers(len(src.rotations))))
        items.append((a, ref(a.object_index, pos), rand, extra))

    samples = []
    for g in range(0, n_anchors, batch_size):
        group = items[g : g + batch_size]
        for i, (a, pos, _, extra) in enumerate(group):
            cands = [pos]
            cands += [group[k][1] for k in range(len(group)) if k != i]
            cands += [group[k][2] for k in range(len(group))]
            cands += [(group[k][0].pyramid, group[k][0].rotation, group[k][0].category) for k in range(len(group)) if k != i]
            cands.append(extra)
            samples.append(
                TrainSample(
                    src=a.pyramid,
                    src_rotation=a.rotation,
                    src_category=a.category,
                    candidates=[c[0] for c in cands],
                    cand_rotations=np.stack([c[1] for c in cands]),
                    cand_categories=[c[2] for c in cands],
                )
            )
    return samples


# ---------------------------------------------------------------- benchmarking


def worker_count() -> int:
    """Worker threads allowed by ``ORIENT_THREADS`` (0 or unset: one per CPU)."""
    try:
        n = int(os.environ.get("ORIENT_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class BenchmarkReport:
    records: list[EvalRecord]
    summary: dict

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["query_id", "true_category", "pred_category", "ref_index", "error", "error_deg",
                    "comparisons", "elapsed_s"])
        for r in self.records:
            w.writerow([r.query_id, r.true_category, r.pred_category, r.ref_index, f"{r.error:.10g}",
                        f"{r.error * 180:.6g}", r.comparisons, f"{r.elapsed:.6g}"])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True)


def retrieve(query: FeaturePyramid, db: ReferenceDB, method: str, variant, params, fast_cfg: FastConfig) -> RetrievalResult:
    if method == "greedy":
        return greedy_search(query, db, params, variant)
    if method == "fast":
        return fast_retrieve(query, db, params, variant, fast_cfg)
    raise ValueError(f"unknown method {method!r}; valid methods: greedy, fast")


def evaluate(
    db: ReferenceDB,
    queries: Sequence[Query],
    method: str = "fast",
    variant="average",
    params: FusionParams | None = None,
    fast_cfg: FastConfig = FastConfig(),
    threshold_deg: float = DEFAULT_THRESHOLD_DEG,
    config: dict | None = None,
    workers: int | None = None,
) -> BenchmarkReport:
    """Retrieve every query and summarize accuracy, comparison counts and latency."""
    variant = Variant.parse(variant)

    def one(q: Query) -> EvalRecord:
        res = retrieve(q.pyramid, db, method, variant, params, fast_cfg)
        err = so3.geodesic_distance(res.rotation, q.rotation)
        return EvalRecord(q.query_id, q.category, q.rotation, res.category, res.rotation, err,
                          res.comparisons, res.elapsed, res.ref_index)

    records = _map(one, list(queries), workers)
    summary = {
        "method": method,
        "variant": variant.value,
        "class_acc": class_acc(records),
        "rota_acc": rota_acc(records, threshold_deg),
        "mean_comparisons": float(np.mean([r.comparisons for r in records])),
        "mean_elapsed_s": float(np.mean([r.elapsed for r in records])),
        "config": dict(config or {}, threshold_deg=threshold_deg, k_local=fast_cfg.k_local,
                       n_queries=len(records), db=db.fingerprint),
    }
    return BenchmarkReport(records, summary)


def run_benchmark(
    task: SynthTask,
    method: str = "fast",
    variant="average",
    params: FusionParams | None = None,
    fast_cfg: FastConfig = FastConfig(),
    threshold_deg: float = DEFAULT_THRESHOLD_DEG,
) -> BenchmarkReport:
    data = gen_task(task)
    return evaluate(data.db(), data.queries, method, variant, params, fast_cfg, threshold_deg,
                    config={"task": task.to_dict()})


def sweep_refs(
    task: SynthTask,
    ref_counts: Sequence[int] = (250, 500, 1000, 2000),
    method: str = "fast",
    variant="average",
    params: FusionParams | None = None,
    fast_cfg: FastConfig = FastConfig(),
) -> list[dict]:
    """Accuracy and cost for nested reference sets of growing size, same queries throughout.

    Queries are rendered at fresh rotations (not copies of references), so
    accuracy reflects how densely the references cover rotation space.
    """
    big = replace(task, n_refs=max(ref_counts), fresh_rotations=True)
    data = gen_task(big)
    rows = []
    for r in sorted(ref_counts):
        db = build(subset_sources(data.sources, r), min(task.k_ac, r))
        rep = evaluate(db, data.queries, method, variant, params, fast_cfg, config={"n_refs": r})
        rows.append({"n_refs": r, **{k: rep.summary[k] for k in ("class_acc", "rota_acc", "mean_comparisons", "mean_elapsed_s")}})
    return rows


def fit_for_task(
    data: SynthData,
    variant="adaptive",
    weighted: bool = True,
    epochs: int = 200,
    lr: float = 0.05,
    n_anchors: int = 64,
    batch_size: int = 16,
    seed: int = 0,
    hidden: int = 64,
    target_loss: float | None = None,
) -> FitResult:
    """Fit fusion parameters on a fresh training set drawn from ``data``, starting from average-equivalent params."""
    train = make_training_set(data, n_anchors, batch_size)
    init = init_params(len(data.task.scale_dims), data.task.channels, hidden, seed=seed)
    cfg = FitConfig(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed, weighted=weighted, variant=variant,
                    target_loss=target_loss)
    return fit_fusion(train, cfg, init)


def run_ablation(
    task: SynthTask,
    method: str = "greedy",
    epochs: int = 200,
    lr: float = 0.05,
    n_anchors: int = 64,
    seed: int = 0,
    local_norm_options: Sequence[bool] = (True, False),
    weighted_options: Sequence[bool] = (True, False),
) -> list[dict]:
    """Rota. Acc. over fusion variants x local normalization x loss weighting.

    The average variant has no parameters, so its rows repeat across the
    weighting options.
    """
    rows = []
    for norm in local_norm_options:
        data = gen_task(replace(task, local_norm=norm))
        db = data.db()
        avg = evaluate(db, data.queries, method, Variant.AVERAGE)
        for weighted in weighted_options:
            for variant in Variant:
                if variant is Variant.AVERAGE:
                    rep, final_loss, init_loss = avg, None, None
                else:
                    fit = fit_for_task(data, variant, weighted, epochs, lr, n_anchors, seed=seed)
                    rep = evaluate(db, data.queries, method, variant, fit.params)
                    final_loss, init_loss = fit.history[-1] if fit.history else fit.initial_loss, fit.initial_loss
                rows.append({
                    "variant": variant.value,
                    "local_norm": norm,
                    "weighted": weighted,
                    "class_acc": rep.summary["class_acc"],
                    "rota_acc": rep.summary["rota_acc"],
                    "mean_comparisons": rep.summary["mean_comparisons"],
                    "initial_loss": init_loss,
                    "final_loss": final_loss,
                })
    return rows


def rows_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


class GeodesicFieldScorer:
    """Synthetic score field: per object, ``base[o] - d(R_ref, target[o])``.

    Unimodal in geodesic distance, so exhaustive search returns the
    reference nearest the target of the highest-based object.
    """

    def __init__(self, db: ReferenceDB, targets: np.ndarray, base: Sequence[float]):
        self.db = db
        self.targets = np.asarray(targets, dtype=np.float64)
        self.base = np.asarray(base, dtype=np.float64)
        self.comparisons = 0

    def score(self, obj: int, ref_ids) -> np.ndarray:
        ref_ids = np.asarray(ref_ids, dtype=int)
        self.comparisons += len(ref_ids)
        return self.base[obj] - so3.geodesic_to_many(self.targets[obj], self.db.objects[obj].rotations[ref_ids])
