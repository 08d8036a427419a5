import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathgen.conformal import (GradeCalibration, PredictionSet, RiskCalibration,
                               calibrate_gradation, calibrate_risk, conformal_quantile,
                               coverage_audit, equal_width_bins, grade_set, grade_uncertainty,
                               load_calibration, quantile_level, risk_interval, risk_uncertainty)


def sorted_quantile_oracle(scores, alpha):
    s = sorted(scores)
    n = len(s)
    k = math.ceil((n + 1) * (1 - alpha))
    return s[-1] if k > n else s[k - 1]


def risk_cal(q_hat, literal=False):
    return RiskCalibration(q_hat, 0.1, 10, equal_width_bins(), True, literal)


# -- quantile ---------------------------------------------------------------

def test_quantile_n19():
    scores = np.random.default_rng(0).permutation(19) / 19
    assert quantile_level(19, 0.1) == pytest.approx(18 / 19)
    q, ok = conformal_quantile(scores, 0.1)
    assert q == sorted(scores)[17] and ok


def test_quantile_n9_takes_max():
    scores = np.random.default_rng(1).uniform(size=9)
    assert quantile_level(9, 0.1) == 1.0
    assert conformal_quantile(scores, 0.1)[0] == scores.max()


def test_quantile_too_small_calibration_set_is_flagged():
    q, ok = conformal_quantile([0.1, 0.5, 0.3], 0.1)
    assert q == 0.5 and not ok


@pytest.mark.parametrize("alpha", [0.05, 0.1, 0.3, 0.9])
def test_constant_scores(alpha):
    assert conformal_quantile([0.25] * 30, alpha)[0] == 0.25


def test_quantile_errors():
    with pytest.raises(ValueError):
        conformal_quantile([], 0.1)
    with pytest.raises(ValueError):
        conformal_quantile([0.1], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0.01, 0.99))
def test_quantile_matches_sort_oracle(scores, alpha):
    assert conformal_quantile(scores, alpha)[0] == sorted_quantile_oracle(scores, alpha)


# -- grade ------------------------------------------------------------------

def test_perfect_classifier_gives_zero_quantile():
    probs = np.eye(3)[[0, 1, 2, 1, 0] * 4]
    assert calibrate_gradation(probs, [0, 1, 2, 1, 0] * 4).q_hat == 0.0


def test_constant_true_probability():
    probs = np.tile([0.6, 0.3, 0.1], (20, 1))
    assert calibrate_gradation(probs, [0] * 20).q_hat == pytest.approx(0.4)


def test_random_probs_match_oracle():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet([1, 1, 1], size=50)
    labels = rng.integers(0, 3, size=50)
    cal = calibrate_gradation(probs, labels, 0.1)
    assert cal.q_hat == sorted_quantile_oracle(1 - probs[np.arange(50), labels], 0.1)
    assert cal.n_cal == 50 and cal.n_classes == 3


def test_grade_label_out_of_range():
    with pytest.raises(ValueError):
        calibrate_gradation(np.full((2, 3), 1 / 3), [0, 3])


def _gcal(q):
    return GradeCalibration(q, 0.1, 20, 3)


def test_grade_set_threshold_examples():
    assert grade_set([0.5, 0.3, 0.2], _gcal(0.6)).members == [0]
    assert grade_set([0.5, 0.3, 0.2], _gcal(1.0)).members == [0, 1, 2]
    assert grade_set([0.5, 0.3, 0.2], _gcal(0.0)).members == []
    assert grade_set([1.0, 0.0, 0.0], _gcal(0.0)).members == [0]


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_grade_set_is_monotone_in_quantile(q1, q2):
    lo, hi = sorted((q1, q2))
    p = [0.45, 0.35, 0.2]
    assert set(grade_set(p, _gcal(lo)).members) <= set(grade_set(p, _gcal(hi)).members)


@pytest.mark.parametrize("members, expected", [([0], 0.0), ([0, 2], 2 / 3), ([0, 1, 2], 1.0),
                                               ([], 0.0), ([1, 2], 1 / 3)])
def test_grade_uncertainty(members, expected):
    assert grade_uncertainty(PredictionSet(members), 3) == pytest.approx(expected)


# -- risk -------------------------------------------------------------------

def test_equal_width_bins_map_bin_one_to_highest_risk():
    assert equal_width_bins() == [(-2.0, -1.0), (-3.0, -2.0), (-4.0, -3.0), (-5.0, -4.0)]


def test_risk_calibration_examples():
    assert calibrate_risk([-1.0, -2.0, -3.0, -4.0] * 5, [1, 2, 3, 4] * 5).q_hat == 0.0
    assert calibrate_risk([-1.5, -2.5, -3.5] * 7, [1, 2, 3] * 7).q_hat == pytest.approx(0.5)


def test_risk_calibration_matches_oracle():
    rng = np.random.default_rng(3)
    bins = rng.integers(1, 5, size=40)
    risks = rng.uniform(-5, -1, size=40)
    upper = np.array([-1.0, -2.0, -3.0, -4.0])[bins - 1]
    assert calibrate_risk(risks, bins, 0.1).q_hat == sorted_quantile_oracle(np.abs(upper - risks), 0.1)


def test_risk_calibration_rejects_bad_input():
    with pytest.raises(ValueError):
        calibrate_risk([-2.0], [5])
    with pytest.raises(ValueError):
        calibrate_risk([-2.0], [1], bin_bounds=[(-5, -3), (-3.5, -1)])


def test_zero_width_interval_is_own_bin():
    s = risk_interval(-2.5, risk_cal(0.0))
    assert s.members == [2] and s.risk_lb == s.risk_ub == -2.5


def test_wide_interval_covers_all_bins():
    s = risk_interval(-3.0, risk_cal(2.0))
    assert s.members == [1, 2, 3, 4]
    assert (s.risk_lb, s.risk_ub) == (-5.0, -1.0)


def test_interval_overlap_rule():
    # [-3.1, -1.9] reaches into [-4, -3], [-3, -2] and [-2, -1]
    s = risk_interval(-2.5, risk_cal(0.6))
    assert s.risk_lb == pytest.approx(-3.1) and s.risk_ub == pytest.approx(-1.9)
    assert s.members == [1, 2, 3]
    assert risk_interval(-2.5, risk_cal(0.4)).members == [2]


def test_closed_interval_touching_a_bin_edge_includes_it():
    assert risk_interval(-2.5, risk_cal(0.5)).members == [1, 2, 3]


def test_literal_rule_admits_bins_outside_interval():
    # interval [-2.9, -2.1]: lb <= t_lb admits bin 1, t_ub <= ub admits bins 3 and 4,
    # while bin 2, which holds the prediction, fails both tests
    s = risk_interval(-2.5, risk_cal(0.4, literal=True))
    assert s.members == [1, 3, 4]


@pytest.mark.parametrize("n, lb, ub, expected", [(2, -3.0, -3.0, 0.0), (2, -3.0, -2.0, 0.125),
                                                 (4, -5.0, -1.0, 1.0)])
def test_risk_uncertainty(n, lb, ub, expected):
    assert risk_uncertainty(list(range(1, n + 1)), lb, ub) == pytest.approx(expected)


def test_risk_uncertainty_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        risk_uncertainty([1], -1.0, -2.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, -1), st.floats(0, 4))
def test_uncertainties_lie_in_unit_interval(r, q):
    s = risk_interval(r, risk_cal(q))
    assert 0 <= risk_uncertainty(s) <= 1
    assert 0 <= grade_uncertainty(s.members[:3], 4) <= 1


# -- audit and persistence ---------------------------------------------------

def test_coverage_audit_limits():
    assert coverage_audit([[0, 1, 2]] * 5, [0, 1, 2, 1, 0]) == 1.0
    assert coverage_audit([[]] * 5, [0, 1, 2, 1, 0]) == 0.0
    with pytest.raises(ValueError):
        coverage_audit([[0]], [0, 1])


def test_calibrations_round_trip_through_json():
    g = GradeCalibration(0.42, 0.1, 30, 3, True)
    r = RiskCalibration(0.7, 0.1, 30, equal_width_bins(), False, True)
    assert load_calibration(g.to_json()) == g
    assert load_calibration(r.to_json()) == r
    with pytest.raises(ValueError):
        load_calibration('{"kind": "other"}')


def test_monte_carlo_grade_coverage():
    # exchangeable scores: coverage averaged over seeds sits just above 1 - alpha
    covs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(1000, 3)) * 2
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        labels = np.array([rng.choice(3, p=p) for p in probs])
        cal = calibrate_gradation(probs[:500], labels[:500], 0.1)
        covs.append(coverage_audit([grade_set(p, cal) for p in probs[500:]], labels[500:]))
    assert 0.88 <= np.mean(covs) <= 0.94
