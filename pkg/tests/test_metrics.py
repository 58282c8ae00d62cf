import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdprior.errors import ContractError
from sdprior.metrics import CLASSES, MapInstance, ap, chamfer, interpolated_ap, map_over, match_ranked
from oracles import brute_force_ap, chamfer_loops


def line(y, x0=0.0, x1=9.0, n=10):
    return np.stack([np.linspace(x0, x1, n), np.full(n, float(y))], 1)


def test_chamfer_identical_is_zero():
    a = line(2.0)
    assert chamfer(a, a) == 0.0


def test_chamfer_parallel_offset():
    assert math.isclose(chamfer(line(0.0), line(0.7)), 0.7, rel_tol=1e-15)


def test_chamfer_empty_raises():
    with pytest.raises(ContractError):
        chamfer(np.zeros((0, 2)), line(0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12))
def test_chamfer_equals_double_loop(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 5, (n, 2)), rng.normal(0, 5, (m, 2))
    assert chamfer(a, b) == chamfer_loops(a, b)
    assert chamfer(a, b) == chamfer(b, a)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_chamfer_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b, t = rng.normal(0, 5, (10, 2)), rng.normal(0, 5, (10, 2)), rng.normal(0, 3, 2)
    assert abs(chamfer(a + t, b + t) - chamfer(a, b)) < 1e-12


def test_perfect_predictions_give_ap_one():
    gt = [MapInstance("divider", line(0)), MapInstance("divider", line(5))]
    preds = [MapInstance(g.cls, g.xy, 0.9) for g in gt]
    assert ap(preds, gt, "divider", 0.5) == 1.0
    assert map_over(preds, gt).mAP == 1.0


def test_no_predictions_gives_zero():
    assert ap([], [MapInstance("boundary", line(0))], "boundary", 1.0) == 0.0


def test_tp_fp_tp_hand_computed():
    gt = [MapInstance("centerline", line(0)), MapInstance("centerline", line(10))]
    preds = [MapInstance("centerline", line(0.1), 0.9),
             MapInstance("centerline", line(5), 0.8),
             MapInstance("centerline", line(10.1), 0.7)]
    tp, n = match_ranked([preds], [gt], "centerline", 0.5)
    assert tp.tolist() == [True, False, True] and n == 2
    # precision 1 up to recall 0.5 (51 points), then 2/3 up to recall 1 (50 points)
    assert math.isclose(ap(preds, gt, "centerline", 0.5), (51 * 1.0 + 50 * 2 / 3) / 101, rel_tol=1e-15)


def test_offset_predictions_threshold_sweep():
    gt = [MapInstance(c, line(3 * i)) for i, c in enumerate(CLASSES)]
    preds = [MapInstance(g.cls, g.xy + [0.0, 0.7], 0.5) for g in gt]
    res = map_over(preds, gt)
    for c in CLASSES:
        assert res.ap[(c, 0.5)] == 0.0
        assert res.ap[(c, 1.0)] == 1.0 and res.ap[(c, 1.5)] == 1.0
        assert math.isclose(res.class_ap(c), 2 / 3)
    assert math.isclose(res.mAP, 2 / 3)


def test_empty_grid_is_undefined():
    res = map_over([], [])
    assert not res.defined and math.isnan(res.mAP)
    assert "undefined" in res.to_csv() and '"undefined"' in res.to_json()


def test_absent_class_excluded():
    gt = [MapInstance("divider", line(0))]
    res = map_over([MapInstance("divider", line(0), 1.0)], gt)
    assert {c for c, _ in res.ap} == {"divider"}
    assert res.mAP == 1.0


def test_tie_broken_by_lower_index():
    gt = [MapInstance("divider", line(0))]
    preds = [MapInstance("divider", line(3), 0.5), MapInstance("divider", line(0), 0.5)]
    tp, _ = match_ranked([preds], [gt], "divider", 1.0)
    assert tp.tolist() == [False, True]


def test_interpolated_ap_definitions():
    assert interpolated_ap(np.array([], dtype=bool), 0) is None
    assert interpolated_ap(np.array([False]), 0) == 0.0
    assert interpolated_ap(np.array([True]), 1) == 1.0


def random_scenes(rng, n_scenes=1, max_inst=5):
    preds, gts = [], []
    for _ in range(n_scenes):
        g = [(CLASSES[rng.integers(3)], line(rng.uniform(-10, 10), rng.uniform(-5, 0), rng.uniform(5, 10), 5))
             for _ in range(rng.integers(0, max_inst + 1))]
        p = []
        for c, xy in g:
            if rng.random() < 0.7:
                p.append((c if rng.random() < 0.8 else CLASSES[rng.integers(3)],
                          xy + rng.normal(0, 0.6, xy.shape), float(rng.choice([0.3, 0.5, rng.random()]))))
        for _ in range(rng.integers(0, 3)):
            p.append((CLASSES[rng.integers(3)], line(rng.uniform(-10, 10), n=5), float(rng.random())))
        preds.append(p)
        gts.append(g)
    return preds, gts


def to_instances(scenes, with_conf):
    return [[MapInstance(x[0], x[1], x[2] if with_conf else None) for x in s] for s in scenes]


@pytest.mark.parametrize("seed", range(50))
def test_ap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scenes(rng, n_scenes=int(rng.integers(1, 4)))
    P, G = to_instances(preds, True), to_instances(gts, False)
    res = map_over(P, G)
    for c in CLASSES:
        for t in (0.5, 1.0, 1.5):
            expect = brute_force_ap(preds, gts, c, t)
            got = res.ap.get((c, t))
            if expect is None:
                assert got is None
            else:
                assert abs(got - expect) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_ap_invariant_to_confidence_rescaling(seed, k):
    rng = np.random.default_rng(seed)
    preds, gts = random_scenes(rng, 2)
    P = to_instances(preds, True)
    Q = [[MapInstance(p.cls, p.xy, p.confidence * k) for p in s] for s in P]
    G = to_instances(gts, False)
    for c in CLASSES:
        a, _ = match_ranked(P, G, c, 1.0)
        b, _ = match_ranked(Q, G, c, 1.0)
        assert np.array_equal(a, b)
    assert map_over(P, G).ap == map_over(Q, G).ap


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_map_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scenes(rng, 2)
    P, G = to_instances(preds, True), to_instances(gts, False)
    values = [map_over(P, G, thresholds=(t,)).mAP for t in (0.25, 0.5, 1.0, 1.5, 3.0)]
    values = [v for v in values if not math.isnan(v)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_values_in_unit_interval():
    rng = np.random.default_rng(5)
    preds, gts = random_scenes(rng, 5)
    res = map_over(to_instances(preds, True), to_instances(gts, False))
    assert all(0.0 <= v <= 1.0 for v in res.ap.values())
