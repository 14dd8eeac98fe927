import math

import numpy as np
import pytest

from orient import refdb, so3
from orient.errors import ShapeMismatch
from orient.evalbench import GeodesicFieldScorer
from orient.features import FeaturePyramid
from orient.fusion import fuse, init_params, similarity_maps
from orient.retrieval import FastConfig, FusionScorer, fast_retrieve, greedy_search, recognize_category


def field_db(seed, n_objects=4, n_refs=2000, k_ac=128):
    # the geodesic scorer only looks at rotations; maps are placeholders
    srcs = [
        refdb.ObjectSource(f"o{o}", so3.sample_rotations(n_refs, 1000 * seed + o), maps=[np.ones((n_refs, 2, 2, 1))])
        for o in range(n_objects)
    ]
    return refdb.build(srcs, k_ac=k_ac)


@pytest.fixture(scope="module")
def mid_db():
    from conftest import random_sources

    return refdb.build(random_sources(20, n_objects=3, n_refs=40), k_ac=8)


# ---------------------------------------------------------------- greedy


def test_self_retrieval(mid_db):
    q = mid_db.objects[1].pyramid(7)
    res = greedy_search(q, mid_db, None, "average")
    assert (res.object_index, res.ref_index, res.category) == (1, 7, "obj1")
    assert res.score == pytest.approx(1.0, abs=1e-5)
    assert res.comparisons == 3 * 40
    assert np.array_equal(res.rotation, mid_db.objects[1].rotations[7])


def test_single_reference_db(make_sources):
    db = refdb.build(make_sources(21, n_objects=1, n_refs=1), k_ac=1)
    res = greedy_search(db.objects[0].pyramid(0), db, None, "average")
    assert (res.ref_index, res.comparisons) == (0, 1)


def test_greedy_ties_go_to_lowest_indices(make_sources):
    (src,) = make_sources(22, n_objects=1, n_refs=6)
    src.maps = [np.repeat(m[:1], 6, axis=0) for m in src.maps]
    other = refdb.ObjectSource("copy", src.rotations, maps=src.maps)
    db = refdb.build([src, other], k_ac=2)
    res = greedy_search(db.objects[0].pyramid(0), db, None, "average")
    assert (res.object_index, res.ref_index) == (0, 0)


def test_scorer_matches_fuse(mid_db):
    q = mid_db.objects[2].pyramid(3)
    params = init_params(2, 4, 16, seed=3, mode="random")
    sc = FusionScorer(q, mid_db, params, "adaptive")
    got = sc.score(0, [5, 9])
    for i, s in zip([5, 9], got):
        expected = fuse(similarity_maps(q, mid_db.objects[0].pyramid(i)), params, "adaptive")
        assert s == pytest.approx(expected, abs=1e-5)
    assert sc.comparisons == 2


def test_shape_mismatch(mid_db):
    bad = FeaturePyramid((np.ones((3, 3, 5), np.float32), np.ones((6, 6, 5), np.float32)))
    for fn in (greedy_search, recognize_category, fast_retrieve):
        with pytest.raises(ShapeMismatch):
            fn(bad, mid_db, None, "average")


def test_learned_variant_needs_params(mid_db):
    with pytest.raises(ValueError):
        greedy_search(mid_db.objects[0].pyramid(0), mid_db, None, "adaptive")


# ---------------------------------------------------------------- category recognition


def test_recognition_counts_anchors(mid_db):
    for o in range(3):
        q = mid_db.objects[o].pyramid(mid_db.objects[o].anchor_ids[2])
        cat = recognize_category(q, mid_db, None, "average")
        assert cat.comparisons == 3 * 8
        assert cat.category == f"obj{o}"
        assert cat.anchor_id == mid_db.objects[o].anchor_ids[2]


def test_recognition_single_object(make_sources):
    db = refdb.build(make_sources(23, n_objects=1, n_refs=10), k_ac=5)
    cat = recognize_category(db.objects[0].pyramid(4), db, None, "average")
    assert (cat.category, cat.comparisons) == ("obj0", 5)


# ---------------------------------------------------------------- fast retrieval


def test_fast_config_validation():
    with pytest.raises(ValueError):
        FastConfig(k_local=1)
    with pytest.raises(ValueError):
        FastConfig(max_iters=0)


def test_all_anchor_db_equals_greedy_on_object(make_sources):
    db = refdb.build(make_sources(24, n_objects=2, n_refs=16), k_ac=16)
    rng = np.random.default_rng(0)
    for _ in range(5):
        q = FeaturePyramid(tuple(rng.random(m.shape[1:]).astype(np.float32) for m in db.objects[0].maps))
        fast = fast_retrieve(q, db, None, "average")
        single = refdb.ReferenceDB((db.objects[fast.object_index],))
        greedy = greedy_search(q, single, None, "average")
        assert fast.ref_index == greedy.ref_index
        # every reference is an anchor, so refinement never scores anything new
        assert fast.comparisons == 2 * 16


@pytest.mark.parametrize("seed", range(50))
def test_unimodal_field_matches_greedy(seed):
    db = field_db(seed)
    rng = np.random.default_rng(seed)
    targets = so3.sample_rotations(4, 7777 + seed)
    base = rng.permutation(4) * 2.0  # separated so recognition is unambiguous
    greedy = greedy_search(None, db, scorer=GeodesicFieldScorer(db, targets, base))
    fast = fast_retrieve(None, db, scorer=GeodesicFieldScorer(db, targets, base))
    assert (fast.object_index, fast.ref_index) == (greedy.object_index, greedy.ref_index)
    assert fast.object_index == int(np.argmax(base))


@pytest.mark.parametrize("seed", range(10))
def test_counting_contract_and_monotone_history(seed):
    db = field_db(seed)
    rng = np.random.default_rng(100 + seed)
    sc = GeodesicFieldScorer(db, so3.sample_rotations(4, seed), rng.uniform(0, 1, 4))
    cfg = FastConfig()
    res = fast_retrieve(None, db, cfg=cfg, scorer=sc)
    max_iters = math.ceil(math.log2(2000))
    assert res.iterations <= max_iters
    assert res.comparisons == sc.comparisons
    assert res.comparisons <= 4 * 128 + max_iters * 32
    assert res.comparisons < 0.1 * 4 * 2000
    assert all(a <= b for a, b in zip(res.best_history, res.best_history[1:]))
    assert res.best_history[-1] == res.score


def test_max_iters_caps_loop():
    db = field_db(3)
    sc = GeodesicFieldScorer(db, so3.sample_rotations(4, 1), [0.0, 1.0, 2.0, 3.0])
    res = fast_retrieve(None, db, cfg=FastConfig(max_iters=2), scorer=sc)
    assert res.iterations <= 2
    assert res.comparisons <= 4 * 128 + 2 * 32


def test_cache_avoids_rescoring():
    db = field_db(4, n_objects=1, n_refs=300, k_ac=32)
    sc = GeodesicFieldScorer(db, so3.sample_rotations(1, 2), [0.0])
    res = fast_retrieve(None, db, cfg=FastConfig(k_local=8), scorer=sc)
    # comparisons never exceed the number of distinct references
    assert res.comparisons <= 300
    assert res.comparisons <= 32 + res.iterations * 8


def test_fast_returns_matching_anchor(mid_db):
    anchor = mid_db.objects[2].anchor_ids[3]
    res = fast_retrieve(mid_db.objects[2].pyramid(anchor), mid_db, None, "average", FastConfig(k_local=4))
    assert (res.object_index, res.ref_index) == (2, anchor)
    assert res.score == pytest.approx(1.0, abs=1e-5)
    d = res.to_dict()
    assert d["category"] == res.category and len(d["rotation"]) == 3
