import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jbsiam.data_io import ScoreSet
from jbsiam.metrics import DCF1, DCF2, DcfParams, dcf_at, det_points, eer, metrics_report, min_dcf

from oracles import brute_eer, brute_min_dcf


def _set(tar, non):
    tar, non = list(tar), list(non)
    return ScoreSet(np.array(tar + non, dtype=float), np.array([True] * len(tar) + [False] * len(non)))


def test_eer_examples():
    assert eer(_set([2, 3], [0, 1]))[0] == 0.0
    assert eer(_set([1, 2, 2, 5], [2, 1, 5, 2]))[0] == 0.5
    assert eer(_set([0.9, 0.8, 0.3], [0.7, 0.2, 0.1]))[0] == pytest.approx(1 / 3, abs=1e-15)


def test_min_dcf_examples():
    assert min_dcf(_set([2, 3], [0, 1]), DCF1)[0] == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = _set(rng.standard_normal(10), rng.standard_normal(10))
        tar, non = s.target_scores.tolist(), s.nontarget_scores.tolist()
        for p in (DCF1, DCF2, DcfParams(0.3, 2.0, 0.5)):
            value = min_dcf(s, p)[0]
            assert value == pytest.approx(brute_min_dcf(tar, non, p.p_target, p.c_miss, p.c_fa), abs=1e-12)
            assert value <= 1.0 + 1e-15


def test_min_dcf_threshold_and_ties():
    s = _set([3.0, 4.0], [1.0, 2.0])
    value, thr = min_dcf(s, DcfParams(0.5))
    # every threshold in (2, 3] is optimal; the lowest swept one is kept
    assert value == 0.0 and thr == 3.0
    assert dcf_at(s, thr, DcfParams(0.5)) == value


def test_rejects_single_class():
    s = ScoreSet(np.array([1.0, 2.0]), np.array([True, True]))
    for fn in (eer, min_dcf, det_points):
        with pytest.raises(ValueError):
            fn(s)


def test_dcf_params_validation():
    for bad in ({"p_target": 0.0}, {"p_target": 1.0}, {"p_target": 0.5, "c_miss": 0.0}):
        with pytest.raises(ValueError):
            DcfParams(**bad)


def test_det_points_and_eer_on_curve():
    rng = np.random.default_rng(1)
    tar, non = rng.normal(1, 1, 40), rng.normal(0, 1, 60)
    s = _set(tar, non)
    pts = det_points(s)
    assert len(pts) <= len(np.unique(s.scores)) + 1
    far, frr = np.array(pts).T
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(frr) >= 0)
    e, _ = eer(s)
    # the EER point lies on a segment between adjacent points straddling the diagonal
    k = int(np.argmax(frr - far >= 0))
    lo, hi = (far[k - 1], frr[k - 1]), (far[k], frr[k])
    t = (e - lo[1]) / (hi[1] - lo[1]) if hi[1] != lo[1] else 0.0
    assert lo[0] + t * (hi[0] - lo[0]) == pytest.approx(e, abs=1e-12)


def test_report_format():
    s = _set([0.9, 0.8, 0.3], [0.7, 0.2, 0.1])
    line = metrics_report(s)
    tag, pct, t1, d1, t2, d2 = line.split()
    assert (tag, t1, t2) == ("EER", "minDCF1", "minDCF2")
    assert float(pct) == pytest.approx(100 / 3, abs=1e-4)


scores = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=20)


@settings(max_examples=150, deadline=None)
@given(tar=scores, non=scores)
def test_matches_brute_force(tar, non):
    s = _set(tar, non)
    assert eer(s)[0] == pytest.approx(brute_eer(tar, non), abs=1e-12)
    assert min_dcf(s, DCF1)[0] == pytest.approx(brute_min_dcf(tar, non, 0.01), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.sampled_from([0.25, 1.0, 2.0, 8.0]), b=st.floats(-4, 4))
def test_affine_and_permutation_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    s = _set(rng.normal(1, 1, 30), rng.normal(0, 1, 50))
    ref = (eer(s)[0], min_dcf(s, DCF1)[0], min_dcf(s, DCF2)[0])
    shifted = ScoreSet(a * s.scores + np.float64(b), s.is_target)
    if len(np.unique(shifted.scores)) == len(np.unique(s.scores)):
        assert (eer(shifted)[0], min_dcf(shifted, DCF1)[0], min_dcf(shifted, DCF2)[0]) == ref
    perm = rng.permutation(len(s.scores))
    permuted = ScoreSet(s.scores[perm], s.is_target[perm])
    assert (eer(permuted)[0], min_dcf(permuted, DCF1)[0], min_dcf(permuted, DCF2)[0]) == ref


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_min_dcf_below_dcf_at_eer_threshold(seed):
    rng = np.random.default_rng(seed)
    s = _set(rng.normal(2, 1, 25), rng.normal(0, 1, 40))
    _, thr = eer(s)
    for p in (DCF1, DCF2):
        assert min_dcf(s, p)[0] <= dcf_at(s, thr, p) + 1e-12
