import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from ktnas.metrics import (IID_CAVEAT, PredictionTrace, TraceAlignmentError, UndefinedMetricError, auc,
                           chi2_sf_1dof, evaluate_trace, mcnemar, mcnemar_from_counts, r2, report, weighted_auc)


def pairwise_auc(scores, labels, weights=None):
    """Weighted Mann-Whitney statistic by brute force over all positive/negative pairs."""
    s = np.asarray(scores, float)
    y = np.asarray(labels)
    w = np.ones(len(s)) if weights is None else np.asarray(weights, float)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    total = 0.0
    for i in pos:
        for j in neg:
            total += w[i] * w[j] * (1.0 if s[i] > s[j] else 0.5 if s[i] == s[j] else 0.0)
    return total / (w[pos].sum() * w[neg].sum())


def random_trace(rng, n):
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    # coarse scores so ties are common
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    return scores, labels, rng.uniform(0.1, 5.0, n)


def chi2_tail_by_quadrature(x):
    """Upper tail of chi-square(1) by integrating its density, independent of erfc."""
    pdf = lambda t: math.exp(-t / 2) / math.sqrt(2 * math.pi * t)  # noqa: E731
    return 1.0 - integrate.quad(pdf, 0, x)[0]


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auc([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx(0.5)


def test_single_class_undefined():
    for f in (auc, weighted_auc):
        with pytest.raises(UndefinedMetricError):
            f([0.1, 0.3], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc([], [])


def test_weighted_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s, y, w = random_trace(rng, int(rng.integers(2, 120)))
        assert weighted_auc(s, y, w) == pytest.approx(pairwise_auc(s, y, w), abs=1e-9)
        assert weighted_auc(s, y, np.full(len(s), 2.5)) == pytest.approx(auc(s, y), abs=1e-9)


def test_integer_weights_equal_duplication():
    rng = np.random.default_rng(1)
    for _ in range(100):
        s, y, _ = random_trace(rng, int(rng.integers(2, 60)))
        k = rng.integers(1, 5, len(s))
        assert weighted_auc(s, y, k) == pytest.approx(auc(np.repeat(s, k), np.repeat(y, k)), abs=1e-12)


def test_matches_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(2)
    for _ in range(50):
        s, y, w = random_trace(rng, 200)
        assert weighted_auc(s, y, w) == pytest.approx(skm.roc_auc_score(y, s, sample_weight=w), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_to_monotone_transform(seed):
    s, y, w = random_trace(np.random.default_rng(seed), 80)
    assert auc(np.exp(3 * s) - 7, y) == pytest.approx(auc(s, y), abs=1e-12)
    assert weighted_auc(s ** 3, y, w) == pytest.approx(weighted_auc(s, y, w), abs=1e-12)


def test_r2_examples():
    assert r2([1, 0, 1.0], [1, 0, 1]) == 1.0
    assert r2([0.5] * 4, [1, 0, 1, 0]) == 0.0
    assert r2([0.8, 0.2, 0.6, 0.4], [1, 0, 1, 0]) == pytest.approx(0.6)
    assert r2([0.0, 1.0], [1, 0]) < 0
    with pytest.raises(UndefinedMetricError):
        r2([0.2, 0.3], [1, 1])
    with pytest.raises(UndefinedMetricError):
        r2([], [])


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=50))
def test_r2_at_most_one(rows):
    p, y = zip(*rows)
    if len(set(y)) < 2:
        return
    assert r2(list(p), list(y)) <= 1.0


def test_mcnemar_examples():
    assert mcnemar_from_counts(15, 5).chi2 == pytest.approx(5.0)
    assert mcnemar_from_counts(15, 5).p_value == pytest.approx(0.025347, abs=1e-6)
    r = mcnemar_from_counts(10, 10)
    assert (r.chi2, r.p_value) == (0.0, 1.0)
    none = mcnemar_from_counts(0, 0, 7, 3)
    assert none.chi2 is None and "no discordance" in none.describe()
    assert IID_CAVEAT in none.describe()


def test_continuity_corrected_variant():
    assert mcnemar_from_counts(15, 5, corrected=True).chi2 == pytest.approx(81 / 20)
    assert mcnemar_from_counts(3, 2, corrected=True).chi2 == 0.0


def test_chi2_tail_against_quadrature_and_scipy():
    assert chi2_sf_1dof(3.841) == pytest.approx(0.05, abs=1e-3)
    for x in (0.01, 0.5, 1.0, 3.841, 6.635, 12.0):
        assert chi2_sf_1dof(x) == pytest.approx(chi2_tail_by_quadrature(x), abs=1e-8)
        assert chi2_sf_1dof(x) == pytest.approx(stats.chi2.sf(x, 1), rel=1e-10)


def test_mcnemar_from_traces_and_antisymmetry():
    y = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    m1 = PredictionTrace.from_arrays([0.9, 0.1, 0.8, 0.3, 0.6, 0.2, 0.7, 0.4], y)
    m2 = PredictionTrace.from_arrays([0.2, 0.1, 0.9, 0.8, 0.3, 0.7, 0.1, 0.6], y)
    r = mcnemar(m1, m2)
    t = r.table
    assert (t.a, t.b, t.c, t.d, t.n) == (2, 4, 2, 0, 8)
    s = mcnemar(m2, m1)
    assert (s.table.b, s.table.c) == (t.c, t.b) and s.chi2 == r.chi2
    assert mcnemar(m1, m1).chi2 is None


def test_mcnemar_misaligned():
    a = PredictionTrace(["s1", "s1"], [0, 1], [0.2, 0.8], [0, 1], [1, 1])
    b = PredictionTrace(["s1", "s2"], [0, 1], [0.2, 0.8], [0, 1], [1, 1])
    with pytest.raises(TraceAlignmentError, match="entry 1"):
        mcnemar(a, b)
    with pytest.raises(TraceAlignmentError):
        mcnemar(a, PredictionTrace.from_arrays([0.1], [0]))


def test_trace_validation():
    with pytest.raises(ValueError):
        PredictionTrace.from_arrays([1.2], [1])
    with pytest.raises(ValueError):
        PredictionTrace.from_arrays([0.2], [2])
    with pytest.raises(ValueError):
        PredictionTrace.from_arrays([0.2], [1], [0.0])
    with pytest.raises(ValueError):
        PredictionTrace(["a"], [0, 1], [0.2], [1], [1])


def test_trace_file_round_trip_is_bit_exact():
    rng = np.random.default_rng(3)
    t = PredictionTrace([f"s{i % 4}" for i in range(30)], rng.integers(0, 9, 30), rng.random(30),
                        rng.integers(0, 2, 30), rng.integers(1, 6, 30).astype(float))
    buf = io.StringIO()
    t.write(buf)
    back = PredictionTrace.read(io.StringIO(buf.getvalue()))
    assert back.students == t.students
    for col in ("skills", "probs", "labels", "weights"):
        assert np.array_equal(getattr(back, col), getattr(t, col))
    buf2 = io.StringIO()
    back.write(buf2)
    assert buf2.getvalue() == buf.getvalue()


def test_report_aggregation_and_missing_folds():
    rng = np.random.default_rng(4)
    s, y, w = random_trace(rng, 50)
    t = PredictionTrace.from_arrays(s, y, w)
    rep = report({0: t, 1: t}, k=3)
    assert rep["missing_folds"] == [2]
    one = evaluate_trace(t)
    assert rep["mean"]["auc"] == pytest.approx(one.auc) and rep["mean"]["wauc"] == pytest.approx(one.wauc)
    assert rep["folds"][0]["n"] == 50


def test_report_mean_of_fold_aucs():
    a = PredictionTrace.from_arrays([0.9, 0.1, 0.6, 0.4, 0.7], [1, 0, 0, 1, 1])
    b = PredictionTrace.from_arrays([0.9, 0.2, 0.8, 0.4, 0.3], [1, 0, 1, 1, 0])
    flat = lambda t: PredictionTrace.from_arrays(np.full(5, 0.5), t.labels)  # noqa: E731
    rep = report({0: a, 1: b}, baseline={0: flat(a), 1: flat(b)})
    assert rep["mean"]["auc"] == pytest.approx((auc(a) + auc(b)) / 2)
    assert "caveat" in rep["mcnemar"]
