import itertools
import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabperceiver import _kernels_py, kernels
from tabperceiver.errors import DegenerateTestError, PreconditionError, UndefinedMetricError
from tabperceiver.metrics import (
    MetricsReport, auc_bootstrap_ci, brier, chi_square, confusion_metrics, multiclass_report,
    one_way_anova, paired_t_test, roc_auc, target_rows)


def brute_auc(scores, labels):
    """Oracle: average over all positive/negative pairs, ties half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


# oracles for the distribution tails, from mpmath's incomplete beta / gamma
def t_two_sided(t, df):
    return float(mpmath.betainc(df / 2, 0.5, 0, df / (df + t * t), regularized=True))


def chi2_sf(x, k):
    return float(mpmath.gammainc(k / 2, x / 2, mpmath.inf, regularized=True))


def f_sf(f, d1, d2):
    return float(mpmath.betainc(d2 / 2, d1 / 2, 0, d2 / (d2 + d1 * f), regularized=True))


# -- AUC -----------------------------------------------------------------------

def test_auc_two_points():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0


def test_auc_all_ties_half():
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_matches_brute_force_50_rows():
    rng = np.random.default_rng(0)
    s = np.round(rng.random(50), 1)  # plenty of ties
    y = rng.integers(0, 2, 50)
    assert roc_auc(s, y) == brute_auc(s, y)


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=60))
def test_auc_backends_agree_with_oracle(pairs):
    s = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    ref = brute_auc(s, y)
    assert _kernels_py.auc_mann_whitney(s, y) == ref
    if kernels.compiled_backend is not None:
        assert kernels.compiled_backend.auc_mann_whitney(s, y) == ref


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_complement_and_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(40)
    y = np.r_[0, 1, rng.integers(0, 2, 38)]
    a = roc_auc(s, y)
    assert abs(a + roc_auc(-s, y) - 1.0) < 1e-12
    assert roc_auc(np.exp(3 * s) + 2.0, y) == a


# -- bootstrap -----------------------------------------------------------------

def test_bootstrap_separated_collapses_to_one():
    s = np.r_[np.zeros(30), np.ones(30)]
    y = np.r_[np.zeros(30), np.ones(30)]
    assert auc_bootstrap_ci(s, y, resamples=300) == (1.0, 1.0)


def test_bootstrap_contains_point_and_deterministic():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 200)
    s = y + rng.standard_normal(200)
    lo, hi = auc_bootstrap_ci(s, y, resamples=500, seed=3)
    assert lo <= roc_auc(s, y) <= hi
    assert auc_bootstrap_ci(s, y, resamples=500, seed=3) == (lo, hi)
    assert auc_bootstrap_ci(s, y, resamples=500, seed=4) != (lo, hi)


def test_bootstrap_backends_agree():
    if kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(2)
    pos, neg = rng.random(40), rng.random(60)
    pi, ni = rng.integers(0, 40, (50, 40)), rng.integers(0, 60, (50, 60))
    np.testing.assert_array_equal(kernels.compiled_backend.bootstrap_aucs(pos, neg, pi, ni),
                                  _kernels_py.bootstrap_aucs(pos, neg, pi, ni))
    # heavy ties, unsorted inputs
    pos, neg = rng.integers(0, 4, 25).astype(float), rng.integers(0, 4, 30).astype(float)
    pi, ni = rng.integers(0, 25, (50, 25)), rng.integers(0, 30, (50, 30))
    np.testing.assert_array_equal(kernels.compiled_backend.bootstrap_aucs(pos, neg, pi, ni),
                                  _kernels_py.bootstrap_aucs(pos, neg, pi, ni))


# -- multiclass / confusion ----------------------------------------------------

def test_multiclass_perfect_and_uniform():
    labels = np.array([0, 1, 2, 2, 1, 0])
    aucs, assigned = multiclass_report(np.eye(3)[labels], labels, ["low", "medium", "high"])
    assert aucs == {"low": 1.0, "medium": 1.0, "high": 1.0}
    assert assigned.tolist() == labels.tolist()
    aucs, _ = multiclass_report(np.full((6, 3), 1 / 3), labels, ["low", "medium", "high"])
    assert all(v == 0.5 for v in aucs.values())


def test_multiclass_absent_class_flagged():
    labels = np.array([0, 1, 0, 1])
    aucs, _ = multiclass_report(np.full((4, 3), 1 / 3), labels, ["low", "medium", "high"])
    assert aucs["high"] is None


def test_confusion_perfect():
    m = confusion_metrics([1, 0, 1, 0], [1, 0, 1, 0], 1)
    assert [m[k] for k in ("sensitivity", "specificity", "precision", "npv")] == [1.0] * 4


def test_confusion_all_positive():
    m = confusion_metrics([1, 1, 1, 1], [1, 0, 1, 0], 1)
    assert m["specificity"] == 0.0
    assert m["npv"] is None


def test_confusion_matches_hand_tabulation():
    rng = np.random.default_rng(7)
    a, y = rng.integers(0, 3, 40), rng.integers(0, 3, 40)
    tp = fp = fn = tn = 0
    for ai, yi in zip(a, y):
        if ai == 2 and yi == 2:
            tp += 1
        elif ai == 2:
            fp += 1
        elif yi == 2:
            fn += 1
        else:
            tn += 1
    m = confusion_metrics(a, y, 2)
    assert (m["tp"], m["fp"], m["fn"], m["tn"]) == (tp, fp, fn, tn)
    assert abs(m["sensitivity"] - tp / (tp + fn)) < 1e-10
    assert abs(m["specificity"] - tn / (tn + fp)) < 1e-10
    assert abs(m["precision"] - tp / (tp + fp)) < 1e-10
    assert abs(m["npv"] - tn / (tn + fn)) < 1e-10


# -- Brier ---------------------------------------------------------------------

def test_brier_perfect_zero():
    y = np.array([0, 2, 1])
    assert brier(np.eye(3)[y], y) == 0.0


def test_brier_binary_constant_half():
    assert brier(np.full((4, 2), 0.5), [0, 1, 1, 0]) == 0.5


def test_brier_matches_brute_force():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(3), 25)
    y = rng.integers(0, 3, 25)
    ref = sum(sum((p[i, c] - (y[i] == c)) ** 2 for c in range(3)) for i in range(25)) / 25
    assert abs(brier(p, y) - ref) < 1e-10


def test_brier_minimised_by_class_frequencies():
    y = np.array([0, 0, 1, 2, 2, 2])
    freq = np.bincount(y, minlength=3) / 6
    best = brier(np.tile(freq, (6, 1)), y)
    rng = np.random.default_rng(0)
    for q in rng.dirichlet(np.ones(3), 200):
        assert brier(np.tile(q, (6, 1)), y) >= best - 1e-12


# -- comparison tests ----------------------------------------------------------

def test_paired_t_shifted_samples_significant():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(30)
    b = a + 1.0 + 0.01 * rng.standard_normal(30)
    assert paired_t_test(a, b).p_value < 1e-6


def test_paired_t_matches_oracle():
    a = np.array([0.71, 0.74, 0.69, 0.75, 0.73, 0.70])
    b = np.array([0.70, 0.72, 0.70, 0.71, 0.72, 0.69])
    d = a - b
    n = len(d)
    mean = sum(d) / n
    sd = (sum((x - mean) ** 2 for x in d) / (n - 1)) ** 0.5
    t = mean / (sd / n ** 0.5)
    res = paired_t_test(a, b)
    assert abs(res.statistic - t) < 1e-10
    assert abs(res.p_value - t_two_sided(t, n - 1)) < 1e-10
    assert res.df == (n - 1,)


def test_paired_t_identical_is_degenerate():
    with pytest.raises(DegenerateTestError):
        paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


def test_chi_square_independent_table():
    res = chi_square([[10, 10], [10, 10]])
    assert res.statistic == 0.0 and res.p_value == 1.0


def test_chi_square_dependent_table():
    res = chi_square([[50, 0], [0, 50]])
    assert res.statistic == 100.0
    assert res.p_value < 1e-10


def test_chi_square_worked_example():
    # 2 x 3 table; expected counts by hand from the margins
    obs = [[20, 15, 25], [30, 25, 15]]
    rows, cols, n = [60, 70], [50, 40, 40], 130
    stat = sum((obs[i][j] - rows[i] * cols[j] / n) ** 2 / (rows[i] * cols[j] / n)
               for i in range(2) for j in range(3))
    res = chi_square(obs)
    assert abs(res.statistic - stat) < 1e-10
    assert abs(res.p_value - chi2_sf(stat, 2)) < 1e-10
    assert res.df == (2,)


def test_chi_square_zero_expected_count():
    with pytest.raises(PreconditionError):
        chi_square([[0, 0], [3, 4]])


def test_anova_equal_means_f_zero():
    res = one_way_anova([[1.0, 3.0], [1.0, 3.0], [1.0, 3.0]])
    assert res.statistic == 0.0 and abs(res.p_value - 1.0) < 1e-12


def test_anova_separated_groups():
    res = one_way_anova([[0.0, 0.01, 0.02], [10.0, 10.01, 10.02], [20.0, 20.01, 20.02]])
    assert res.p_value < 1e-10


def test_anova_worked_example():
    groups = [[6, 8, 4, 5, 3, 4], [8, 12, 9, 11, 6, 8], [13, 9, 11, 8, 7, 12]]
    allv = [x for g in groups for x in g]
    grand = sum(allv) / len(allv)
    ssb = sum(len(g) * (sum(g) / len(g) - grand) ** 2 for g in groups)
    ssw = sum((x - sum(g) / len(g)) ** 2 for g in groups for x in g)
    f = (ssb / 2) / (ssw / 15)
    res = one_way_anova(groups)
    assert abs(res.statistic - f) < 1e-10
    assert abs(f - 9.26470588235294) < 1e-10
    assert abs(res.p_value - f_sf(f, 2, 15)) < 1e-10


def test_anova_zero_within_variance():
    with pytest.raises(DegenerateTestError):
        one_way_anova([[1.0, 1.0], [2.0, 2.0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_p_values_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(8), rng.standard_normal(8)
    assert 0.0 <= paired_t_test(a, b).p_value <= 1.0
    res = chi_square(rng.integers(1, 30, (3, 2)))
    assert res.statistic >= 0 and 0.0 <= res.p_value <= 1.0
    assert 0.0 <= one_way_anova([a, b, a + 1]).p_value <= 1.0


# -- report --------------------------------------------------------------------

def test_report_rows_text_and_json_round_trip():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 90)
    p = rng.dirichlet(np.ones(3), 90)
    rows = target_rows("risk", p, y, ("low", "medium", "high"), resamples=100)
    rep = MetricsReport(rows=rows)
    assert [r.target for r in rep.rows] == ["low", "medium", "high"]
    for r in rep.rows:
        assert r.ci_low <= r.auc <= r.ci_high
        assert 0.0 <= r.brier <= 2.0
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back.to_json() == rep.to_json()
    text = rep.to_text()
    assert "AUC (95% CI)" in text and "Brier Score" in text and "Specificity" in text
