import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dbenet.errors import UndefinedMetricError
from dbenet.geom import RigidTransform, compose, random_rotation, rotation_about_axis
from dbenet.metrics import (BenchmarkReport, PairEvalRecord, fmr, ground_truth_pairs, inlier_ratio, rmse, rr,
                            rre, rre_trace, rte, success_rate)
from dbenet.registration import CorrespondenceSet

seeds = st.integers(0, 2**31 - 1)


def rec(pid, ir=0.5, err=0.1, t=0.1, r=1.0, evaluable=True):
    return PairEvalRecord(pid, ir, ir > 0.05, err, t, r, evaluable and err < 0.2, evaluable=evaluable)


def test_inlier_ratio_examples():
    X = np.random.default_rng(0).normal(size=(10, 3))
    c = CorrespondenceSet(np.arange(10), np.arange(10), np.zeros(10))
    I = RigidTransform.identity()
    assert inlier_ratio(c, X, X, I) == 1.0
    assert inlier_ratio(c, X, X + [1.0, 0, 0], I) == 0.0
    with pytest.raises(UndefinedMetricError):
        inlier_ratio(CorrespondenceSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0)), X, X, I)


@given(seeds)
def test_inlier_ratio_bruteforce(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.uniform(0, 0.5, size=(30, 3)), rng.uniform(0, 0.5, size=(25, 3))
    src, dst = rng.integers(0, 30, 40), rng.integers(0, 25, 40)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3) * 0.1)
    count = sum(np.linalg.norm(T.rotation @ X[i] + T.translation - Y[j]) <= 0.1 for i, j in zip(src, dst))
    assert inlier_ratio(CorrespondenceSet(src, dst, np.zeros(40)), X, Y, T) == count / 40


def test_fmr_examples():
    assert fmr([1.0, 1.0]) == 100.0
    assert fmr([0.0, 0.0]) == 0.0
    assert fmr([0.04, 0.05, 0.06]) == pytest.approx(100 / 3)
    with pytest.raises(UndefinedMetricError):
        fmr([])


def test_rmse_examples():
    rng = np.random.default_rng(1)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    X = rng.normal(size=(20, 3))
    assert rmse(T, X, T.apply(X)) == pytest.approx(0.0, abs=1e-12)
    shifted = compose(RigidTransform(np.eye(3), [0.1, 0, 0]), T)
    assert rmse(shifted, X, T.apply(X)) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        rmse(T, np.zeros((0, 3)), np.zeros((0, 3)))


def test_rre_rte_examples():
    I = np.eye(3)
    assert rre(I, I) == 0.0
    assert rre(rotation_about_axis([0, 0, 1], np.pi), I) == pytest.approx(180.0, abs=1e-9)
    assert rre(rotation_about_axis([1, 0, 0], np.radians(30)), I) == pytest.approx(30.0, abs=1e-9)
    assert rte([1, 2, 3], [1, 2, 3]) == 0.0
    assert rte([3, 4, 0], [0, 0, 0]) == 5.0


@given(seeds)
def test_rre_properties(seed):
    rng = np.random.default_rng(seed)
    A, B, Q = random_rotation(rng), random_rotation(rng), random_rotation(rng)
    e = rre(A, B)
    assert 0 <= e <= 180
    assert rre(Q @ A, Q @ B) == pytest.approx(e, abs=1e-9)
    assert e == pytest.approx(rre_trace(A, B), abs=1e-6)
    assert rre(A, A) < 1e-6


def test_success_and_rr():
    recs = [rec("a", err=0.1, t=1.0, r=4.0), rec("b", err=0.25, t=2.0, r=1.0), rec("c", err=0.19, t=0.1, r=5.0)]
    assert rr(recs) == pytest.approx(200 / 3)
    assert success_rate(recs) == pytest.approx(100 / 3)
    ne = recs + [rec("d", err=float("nan"), evaluable=False)]
    assert rr(ne) == rr(recs)
    with pytest.raises(UndefinedMetricError):
        rr([rec("x", evaluable=False)])


def test_ground_truth_pairs_bruteforce():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 1, size=(60, 3))
    Y = np.vstack([X[:40] + rng.normal(0, 0.01, size=(40, 3)), rng.uniform(0, 1, size=(20, 3))])
    I = RigidTransform.identity()
    gi, gj = ground_truth_pairs(X, Y, I, 0.05)
    D = np.linalg.norm(X[:, None] - Y[None], axis=2)
    fwd, back = D.argmin(1), D.argmin(0)
    expect = [(i, fwd[i]) for i in range(60) if back[fwd[i]] == i and D[i, fwd[i]] < 0.05]
    assert list(zip(gi.tolist(), gj.tolist())) == [(int(a), int(b)) for a, b in expect]


def test_report_aggregates_recompute_and_serialize():
    rng = np.random.default_rng(0)
    recs = [rec(str(i), rng.uniform(), rng.uniform(0, 0.4), rng.uniform(0, 3), rng.uniform(0, 10))
            for i in range(15)]
    rep = BenchmarkReport(recs)
    assert rep.verify()
    a = rep.aggregates
    assert a["FMR"] == fmr([r.inlier_ratio for r in recs])
    assert a["RTE_mean"] == pytest.approx(np.mean([r.rte for r in recs]))
    rep.aggregates["RR"] += 1
    assert not rep.verify()
    lines = BenchmarkReport(recs).to_jsonl().splitlines()
    assert len(lines) == 15 and json.loads(lines[0])["pair_id"] == "0"
    txt = BenchmarkReport(recs).to_text()
    assert "FMR (%)" in txt and "RRE (deg)" in txt and "Success (%)" in txt
    with pytest.raises(UndefinedMetricError):
        BenchmarkReport([])


def test_record_json_marks_nan_as_null():
    d = json.loads(rec("z", err=float("nan"), evaluable=False).to_json())
    assert d["rmse"] is None and d["evaluable"] is False
