"""Survival statistics tests.

Reference values for the chi-square tail, the log-rank test, and the Cox
fitter were computed once with scipy 1.11 / statsmodels 0.14 (PHReg,
Breslow ties) and are frozen here as literals; the implementations under
test share no code with those references. The 20-patient Cox fixture lives
in tests/fixtures/cox20.csv.
"""

import csv
import math

import numpy as np
import pytest

from conftest import fixture_path, records_from
from pathsurv.autodiff import SegmentMap, Tape, finite_difference_check
from pathsurv.errors import DataError, NoEventsError
from pathsurv.survival import (
    SurvivalRecord,
    breslow_risk_sets,
    chi2_sf,
    concordance_index,
    cox_loss,
    cox_nll_value,
    fit_coxph,
    kaplan_meier,
    log_rank_test,
    stratify_risk,
    time_dependent_auc,
)

# chi2.sf reference points (scipy 1.11)
CHI2_SF_TABLE = [
    (3.841, 1, 0.050013683763956804),
    (5.991, 2, 0.05001161502657909),
    (0.5, 1, 0.47950012218695337),
    (10.0, 4, 0.04042768199451279),
    (25.0, 1, 5.733031437583875e-07),
]

# scipy.stats.logrank on {1..5} vs {11..15}, all events
LOGRANK_SEPARATED_CHI2 = 9.700742820077762
LOGRANK_SEPARATED_P = 0.0018419354016198002

# statsmodels PHReg (Breslow) on tests/fixtures/cox20.csv
COX20_COEF = 0.9947850693778614
COX20_SE = 0.40348231888743785
COX20_P = 0.013682273161044676
COX20_LL = -25.607386726547663


def load_cox20():
    with open(fixture_path("cox20.csv")) as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r["x"]) for r in rows])
    records = [
        SurvivalRecord(r["patient_id"], float(r["time"]), int(r["event"]))
        for r in rows
    ]
    return x, records


class TestSurvivalRecord:
    def test_validation(self):
        with pytest.raises(DataError):
            SurvivalRecord("P1", -1.0, 1)
        with pytest.raises(DataError):
            SurvivalRecord("P1", 1.0, 2)
        r = SurvivalRecord("P1", 0.0, 0)
        assert r.time == 0.0 and r.event == 0


class TestBreslowRiskSets:
    def test_risk_sets_and_tie_counts(self):
        records = records_from([5, 1, 3, 3, 2], [1, 1, 1, 1, 0])
        event_times, tie_counts, risk_sets = breslow_risk_sets(records)
        np.testing.assert_array_equal(event_times, [1, 3, 5])
        np.testing.assert_array_equal(tie_counts, [1, 2, 1])
        # risk set at t: everyone with observed time >= t
        assert sorted(risk_sets[0]) == [0, 1, 2, 3, 4]
        assert sorted(risk_sets[1]) == [0, 2, 3]
        assert sorted(risk_sets[2]) == [0]


class TestCoxLoss:
    def test_two_equal_scores_is_log_two(self):
        """One event among two equal-risk patients: NLL = log 2 exactly."""
        records = records_from([1.0, 2.0], [1, 0])
        theta = np.array([[0.7], [0.7]])
        nll = cox_nll_value(theta, records)
        assert abs(nll - math.log(2.0)) < 1e-15

        tape = Tape()
        node = tape.input(theta)
        loss = cox_loss(tape, node, records)
        assert abs(float(tape.value(loss)[0, 0]) - math.log(2.0)) < 1e-15

    def test_tape_and_plain_nll_agree(self, rng):
        records = records_from(rng.uniform(1, 50, 12), rng.integers(0, 2, 12))
        if not any(r.event for r in records):
            records[0] = SurvivalRecord(records[0].patient_id, records[0].time, 1)
        theta = rng.standard_normal((12, 1))
        tape = Tape()
        loss = cox_loss(tape, tape.input(theta), records)
        np.testing.assert_allclose(
            float(tape.value(loss)[0, 0]), cox_nll_value(theta, records),
            rtol=1e-14,
        )

    def test_shift_invariance(self, rng):
        """The partial likelihood only sees score differences."""
        records = records_from(rng.uniform(1, 50, 10), [1, 0, 1, 1, 0, 1, 0, 1, 1, 0])
        theta = rng.standard_normal((10, 1))
        a = cox_nll_value(theta, records)
        b = cox_nll_value(theta + 123.456, records)
        assert abs(a - b) < 1e-9

    def test_large_scores_stay_finite(self):
        records = records_from([1, 2, 3], [1, 1, 0])
        nll = cox_nll_value(np.array([[800.0], [-800.0], [0.0]]), records)
        assert math.isfinite(nll)

    def test_gradient_matches_finite_differences(self, rng):
        records = records_from(rng.uniform(1, 30, 8), [1, 1, 0, 1, 0, 1, 1, 0])
        theta0 = rng.standard_normal((8, 1))

        def f(arr):
            tape = Tape()
            node = tape.input(arr)
            loss = cox_loss(tape, node, records)
            tape.backward(loss)
            return float(tape.value(loss)[0, 0]), tape.grad(node)

        err = finite_difference_check(f, theta0, 1e-6)
        assert err < 1e-8

    def test_l2_term_uses_regularized_nodes(self, rng):
        records = records_from([1.0, 2.0], [1, 0])
        theta = np.array([[0.0], [0.0]])
        w = rng.standard_normal((3, 3))
        tape = Tape()
        wnode = tape.input(w)
        loss = cox_loss(tape, tape.input(theta), records, lam=0.5,
                        regularized=[wnode])
        expected = math.log(2.0) + 0.5 * float(np.sum(w * w))
        np.testing.assert_allclose(float(tape.value(loss)[0, 0]), expected,
                                   rtol=1e-14)

    def test_no_events_raises(self):
        records = records_from([1.0, 2.0], [0, 0])
        tape = Tape()
        node = tape.input(np.zeros((2, 1)))
        with pytest.raises(NoEventsError):
            cox_loss(tape, node, records)


class TestConcordance:
    def test_perfect_and_reversed(self):
        records = records_from([1, 2, 3, 4], [1, 1, 1, 1])
        assert concordance_index(np.array([4, 3, 2, 1]), records) == 1.0
        assert concordance_index(np.array([1, 2, 3, 4]), records) == 0.0

    def test_ties_count_half(self):
        records = records_from([1, 2], [1, 1])
        assert concordance_index(np.array([5.0, 5.0]), records) == 0.5

    def test_censored_before_event_not_comparable(self):
        # censored at t=1 cannot be ordered against the event at t=2
        records = records_from([1, 2], [0, 1])
        with pytest.raises(DataError):
            concordance_index(np.array([1.0, 2.0]), records)

    def test_matches_pair_counting_oracle(self, rng):
        times = rng.uniform(1, 100, 30)
        events = rng.integers(0, 2, 30)
        events[0] = 1
        scores = rng.standard_normal(30)
        records = records_from(times, events)
        conc = comp = 0.0
        for i in range(30):
            for j in range(30):
                if events[i] == 1 and times[i] < times[j]:
                    comp += 1
                    conc += (
                        1.0 if scores[i] > scores[j]
                        else 0.5 if scores[i] == scores[j] else 0.0
                    )
        np.testing.assert_allclose(
            concordance_index(scores, records), conc / comp, rtol=1e-15
        )


class TestTimeDependentAuc:
    def test_default_horizon_is_median_observed(self, rng):
        times = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        events = np.array([1, 1, 0, 0, 0])
        scores = np.array([5.0, 4.0, 1.0, 2.0, 3.0])
        records = records_from(times, events)
        # horizon = 3: cases {0,1}, controls {3,4}
        auc = time_dependent_auc(scores, records)
        assert auc == 1.0
        explicit = time_dependent_auc(scores, records, horizon=3.0)
        assert explicit == auc

    def test_tied_scores_half_credit(self):
        records = records_from([1.0, 10.0], [1, 0])
        assert time_dependent_auc(np.array([2.0, 2.0]), records, 5.0) == 0.5

    def test_empty_case_or_control_raises(self):
        records = records_from([1.0, 2.0], [1, 1])
        with pytest.raises(DataError):
            time_dependent_auc(np.array([1.0, 2.0]), records, horizon=100.0)


class TestKaplanMeier:
    def test_censoring_shrinks_risk_set_without_step(self):
        """Times (1, 2, 3): an event, a censoring, an event.

        S(1) = 1 - 1/3 = 2/3; the censored patient leaves the risk set at
        t=2 with no step; S(3) = 2/3 * (1 - 1/1) = 0.
        """
        curve = kaplan_meier(records_from([1, 2, 3], [1, 0, 1]))
        np.testing.assert_array_equal(curve.times, [1, 3])
        np.testing.assert_allclose(curve.survival, [2.0 / 3.0, 0.0])
        np.testing.assert_array_equal(curve.at_risk, [3, 1])
        assert curve.survival_at(0.5) == 1.0
        assert curve.survival_at(1.0) == pytest.approx(2.0 / 3.0)
        assert curve.survival_at(2.5) == pytest.approx(2.0 / 3.0)
        assert curve.survival_at(99.0) == 0.0

    def test_two_events_then_censored(self):
        """Times (1, 2, 3): two events then a censoring.

        S(2) = (1 - 1/3)(1 - 1/2) = 1/3 and the curve never reaches zero.
        """
        curve = kaplan_meier(records_from([1, 2, 3], [1, 1, 0]))
        np.testing.assert_allclose(curve.survival, [2.0 / 3.0, 1.0 / 3.0])
        assert curve.survival_at(3.0) == pytest.approx(1.0 / 3.0)

    def test_tied_events_single_step(self):
        curve = kaplan_meier(records_from([2, 2, 2, 5], [1, 1, 0, 0]))
        np.testing.assert_array_equal(curve.times, [2])
        np.testing.assert_allclose(curve.survival, [0.5])
        np.testing.assert_array_equal(curve.events, [2])

    def test_empty_raises(self):
        with pytest.raises(DataError):
            kaplan_meier([])


class TestChiSquareTail:
    def test_frozen_reference_points(self):
        for x, df, expected in CHI2_SF_TABLE:
            assert chi2_sf(x, df) == pytest.approx(expected, rel=1e-12, abs=1e-18)

    def test_bounds_and_monotonicity(self):
        assert chi2_sf(0.0, 3) == 1.0
        values = [chi2_sf(x, 3) for x in np.linspace(0.01, 40, 50)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert all(0.0 <= v <= 1.0 for v in values)

    def test_df_two_closed_form(self):
        # df=2 tail is exp(-x/2)
        for x in (0.5, 1.0, 5.0, 20.0):
            assert chi2_sf(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-12)


class TestLogRank:
    def test_frozen_separated_groups(self):
        records = records_from([1, 2, 3, 4, 5, 11, 12, 13, 14, 15], [1] * 10)
        labels = [0] * 5 + [1] * 5
        chi2, p = log_rank_test(records, labels)
        assert chi2 == pytest.approx(LOGRANK_SEPARATED_CHI2, rel=1e-12)
        assert p == pytest.approx(LOGRANK_SEPARATED_P, rel=1e-12)

    def test_label_symmetry(self):
        records = records_from([1, 2, 3, 4, 5, 11, 12, 13, 14, 15], [1] * 10)
        a = log_rank_test(records, [0] * 5 + [1] * 5)
        b = log_rank_test(records, [1] * 5 + [0] * 5)
        assert a[0] == pytest.approx(b[0], rel=1e-12)

    def test_identical_groups_statistic_zero(self):
        # interleave the same survival experience across both groups
        records = records_from([1, 1, 2, 2, 3, 3], [1, 1, 1, 1, 0, 0])
        chi2, p = log_rank_test(records, [0, 1, 0, 1, 0, 1])
        assert chi2 == pytest.approx(0.0, abs=1e-12)
        assert p == pytest.approx(1.0)

    def test_three_groups_uses_two_dof(self):
        rng = np.random.default_rng(3)
        times = rng.uniform(1, 50, 30)
        records = records_from(times, [1] * 30)
        labels = [0, 1, 2] * 10
        chi2, p = log_rank_test(records, labels)
        assert p == pytest.approx(chi2_sf(chi2, 2), rel=1e-12)

    def test_single_group_rejected(self):
        records = records_from([1, 2], [1, 1])
        with pytest.raises(DataError):
            log_rank_test(records, [0, 0])


class TestCoxFitter:
    def test_matches_frozen_reference(self):
        x, records = load_cox20()
        fit = fit_coxph(x, records)
        assert fit.converged
        assert fit.coef[0] == pytest.approx(COX20_COEF, abs=1e-8)
        assert fit.se[0] == pytest.approx(COX20_SE, abs=1e-8)
        assert fit.p_values[0] == pytest.approx(COX20_P, abs=1e-8)
        assert fit.log_likelihood == pytest.approx(COX20_LL, abs=1e-8)
        assert fit.hazard_ratio[0] == pytest.approx(math.exp(COX20_COEF), rel=1e-8)
        np.testing.assert_allclose(
            fit.ci_lower[0], math.exp(COX20_COEF - 1.96 * COX20_SE), rtol=1e-8
        )

    def test_null_data_coefficient_near_zero(self, rng):
        x = rng.standard_normal(60)
        records = records_from(rng.uniform(1, 100, 60), rng.integers(0, 2, 60))
        if not any(r.event for r in records):
            records[0] = SurvivalRecord(records[0].patient_id, 1.0, 1)
        fit = fit_coxph(x, records)
        assert fit.converged
        assert abs(fit.coef[0]) < 3 * fit.se[0] + 0.5

    def test_rejects_constant_covariate(self):
        records = records_from([1, 2, 3], [1, 1, 0])
        with pytest.raises(DataError):
            fit_coxph(np.ones(3), records)

    def test_rejects_rank_deficiency(self):
        records = records_from([1, 2, 3, 4, 5], [1, 1, 0, 1, 0])
        x = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
        with pytest.raises(DataError):
            fit_coxph(x, records)

    def test_rejects_no_events(self):
        records = records_from([1, 2, 3], [0, 0, 0])
        with pytest.raises(NoEventsError):
            fit_coxph(np.array([1.0, 2.0, 3.0]), records)

    def test_monotone_likelihood_not_fatal(self):
        """Perfectly separated data: the MLE is infinite. The fitter must
        return (score still shrinks below tol as the likelihood plateaus)
        with the telltale enormous standard error, not crash."""
        records = records_from([1, 2, 3, 10, 11, 12], [1, 1, 1, 1, 1, 1])
        x = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        fit = fit_coxph(x, records, max_iter=25)
        assert fit.coef[0] > 5.0
        assert fit.se[0] > 100.0 * abs(fit.coef[0])
        assert math.isinf(fit.ci_upper[0])


class TestStratifyRisk:
    def test_median_split_ties_to_lower(self):
        scores = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        labels, cuts = stratify_risk(scores, "median")
        np.testing.assert_array_equal(labels, [0, 0, 0, 1, 1])
        assert cuts[0] == 3.0

    def test_tertiles(self):
        scores = np.arange(9.0)
        labels, cuts = stratify_risk(scores, "tertiles")
        assert sorted(set(labels.tolist())) == [0, 1, 2]
        np.testing.assert_array_equal(np.bincount(labels), [3, 3, 3])

    def test_reuses_training_cutpoints(self):
        train = np.array([0.0, 1.0, 2.0, 3.0])
        _, cuts = stratify_risk(train, "median")
        labels, _ = stratify_risk(np.array([-5.0, 10.0]), "median", cuts)
        np.testing.assert_array_equal(labels, [0, 1])

    def test_degenerate_scores_raise(self):
        with pytest.raises(DataError):
            stratify_risk(np.ones(4), "median")

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            stratify_risk(np.arange(4.0), "quartiles")
