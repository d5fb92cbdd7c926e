import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rasa import numcore as nc
from rasa.survstats import (UndefinedStatisticError, chi2_sf, concordance_index, cox_loss,
                            gammaincc, kaplan_meier, kl_loss, log_rank_test)
from oracles import brute_cindex, brute_cox, brute_km, central_difference, chi2_1_sf_erfc


def _cox(y, t, d):
    return cox_loss(nc.Tensor(np.asarray(y, dtype=float)), t, d).item()


def _random_instance(rng, n):
    y = rng.normal(size=n) * 2
    t = rng.integers(1, 5, size=n).astype(float)  # small range forces ties
    d = rng.integers(0, 2, size=n).astype(float)
    return y, t, d


class TestCoxLoss:
    def test_two_tied_scores(self):
        assert _cox([0.0, 0.0], [1.0, 2.0], [1, 1]) == pytest.approx(math.log(2), abs=1e-15)

    def test_single_event_is_zero(self):
        assert _cox([3.7], [2.0], [1]) == 0.0

    def test_no_events_is_zero(self):
        assert _cox([0.3, -1.2, 2.0], [1.0, 2.0, 3.0], [0, 0, 0]) == 0.0

    def test_brute_force_small_instances(self):
        rng = np.random.default_rng(0)
        for n in range(1, 7):
            for _ in range(60):
                y, t, d = _random_instance(rng, n)
                assert abs(_cox(y, t, d) - brute_cox(y, t, d)) < 1e-10

    def test_fractional_events(self):
        y, t = np.array([0.2, -0.4, 1.1]), np.array([1.0, 2.0, 3.0])
        d = np.array([0.3, 0.7, 1.0])
        assert _cox(y, t, d) == pytest.approx(brute_cox(y, t, d), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
    def test_shift_invariance(self, seed, c):
        y, t, d = _random_instance(np.random.default_rng(seed), 8)
        assert abs(_cox(y + c, t, d) - _cox(y, t, d)) < 1e-8

    def test_large_scores_finite(self):
        assert math.isfinite(_cox([800.0, -800.0, 0.0], [1.0, 2.0, 3.0], [1, 1, 1]))

    def test_gradient(self, rng):
        y, t, d = _random_instance(rng, 6)
        x = nc.Tensor(y, requires_grad=True)
        with nc.Tape() as tape:
            loss = cox_loss(x, t, d)
        nc.backward(tape, loss)
        (num,) = central_difference(lambda a: brute_cox(a, t, d), [y.copy()])
        np.testing.assert_allclose(x.grad, num, atol=1e-7)

    @pytest.mark.parametrize("t", [[0.0, 1.0], [-1.0, 2.0]])
    def test_nonpositive_time(self, t):
        with pytest.raises(ValueError):
            _cox([0.0, 0.0], t, [1, 1])

    def test_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            _cox([], [], [])
        y = nc.Tensor([0.0, 0.0])
        y.data[0] = np.nan
        with pytest.raises(nc.NonFiniteError):
            cox_loss(y, [1.0, 2.0], [1, 1])


class TestKl:
    def test_equal_scores(self):
        assert kl_loss(nc.Tensor(1.3), 1.3).item() == 0.0

    def test_reference_value(self):
        # student probability 0.5, teacher probability 0.75 (score ln 3)
        expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
        assert expected == pytest.approx(0.143841, abs=1e-6)
        assert kl_loss(nc.Tensor(0.0), math.log(3.0)).item() == pytest.approx(expected, abs=1e-14)

    def test_extreme_scores_finite(self):
        assert math.isfinite(kl_loss(nc.Tensor(60.0), -60.0).item())

    def test_clamped_gradient_is_zero(self):
        x = nc.Tensor(60.0, requires_grad=True)
        with nc.Tape() as tape:
            loss = kl_loss(x, 0.0)
        nc.backward(tape, loss)
        assert x.grad == 0.0

    def test_gradient(self):
        x = nc.Tensor(0.4, requires_grad=True)
        with nc.Tape() as tape:
            loss = kl_loss(x, -0.7)
        nc.backward(tape, loss)
        (num,) = central_difference(lambda a: kl_loss(nc.Tensor(a), -0.7).item(),
                                    [np.array(0.4)])
        assert np.ravel(x.grad)[0] == pytest.approx(np.ravel(num)[0], abs=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-20, 20), st.floats(-20, 20))
    def test_nonnegative(self, a, b):
        assert kl_loss(nc.Tensor(a), b).item() >= 0.0


class TestConcordance:
    def test_perfect_and_reversed(self):
        t, e = [1.0, 2.0, 3.0], [1, 1, 1]
        assert concordance_index([3.0, 2.0, 1.0], t, e) == 1.0
        assert concordance_index([1.0, 2.0, 3.0], t, e) == 0.0

    def test_three_pair_enumeration(self):
        # comparable pairs (1,2), (1,3), (2,3); only (2,3) is discordant
        assert concordance_index([3.0, 1.0, 2.0], [1.0, 2.0, 3.0], [1, 1, 1]) == pytest.approx(2 / 3)

    def test_all_tied_scores(self):
        assert concordance_index([0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [1, 1, 1]) == 0.5

    def test_no_comparable_pairs(self):
        with pytest.raises(UndefinedStatisticError):
            concordance_index([1.0, 2.0], [1.0, 2.0], [0, 0])

    def test_fractional_events_thresholded(self):
        assert concordance_index([2.0, 1.0], [1.0, 2.0], [0.5, 0]) == 1.0
        with pytest.raises(UndefinedStatisticError):
            concordance_index([2.0, 1.0], [1.0, 2.0], [0.49, 0])

    def test_oracle_agreement(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(1000):
            n = int(rng.integers(2, 51))
            s = rng.integers(0, 6, size=n).astype(float)  # many score ties
            t = rng.integers(1, 10, size=n).astype(float)
            e = rng.integers(0, 2, size=n).astype(float)
            ref = brute_cindex(s, t, e)
            if ref is None:
                with pytest.raises(UndefinedStatisticError):
                    concordance_index(s, t, e)
                continue
            assert concordance_index(s, t, e) == ref
            checked += 1
        assert checked > 900

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=30)
        t = rng.exponential(size=30) + 0.01
        e = np.ones(30)
        base = concordance_index(s, t, e)
        assert concordance_index(np.exp(s), t, e) == base
        assert concordance_index(3 * s + 1, t, e) == base


class TestKaplanMeier:
    def test_hand_example(self):
        km = kaplan_meier([1, 2, 3, 4], [1, 0, 1, 1])
        assert km.times.tolist() == [1.0, 3.0, 4.0]
        assert km.survival.tolist() == [0.75, 0.375, 0.0]
        assert km.at(0.5) == 1.0 and km.at(2.5) == 0.75

    def test_equal_steps(self):
        km = kaplan_meier([4.0, 1.0, 3.0, 2.0], [1, 1, 1, 1])
        assert km.survival.tolist() == [0.75, 0.5, 0.25, 0.0]
        assert km.at_risk.tolist() == [4, 3, 2, 1]

    def test_no_events(self):
        km = kaplan_meier([1.0, 2.0], [0, 0])
        assert len(km) == 0 and km.at(5.0) == 1.0

    def test_matches_brute_force_and_is_monotone(self, rng):
        for _ in range(50):
            t = rng.integers(1, 8, size=20).astype(float)
            e = rng.integers(0, 2, size=20).astype(float)
            km = kaplan_meier(t, e)
            ref = brute_km(t, e)
            assert km.times.tolist() == [u for u, _ in ref]
            np.testing.assert_allclose(km.survival, [s for _, s in ref], atol=1e-15)
            assert np.all(np.diff(km.survival) <= 0)


class TestLogRank:
    def test_identical_groups(self):
        t, e = [1.0, 2.0, 3.0, 4.0], [1, 0, 1, 1]
        chi2, p = log_rank_test(t, e, t, e)
        assert chi2 == 0.0 and p == 1.0

    def test_separated_groups_small_p(self):
        chi2, p = log_rank_test(np.arange(1, 21), np.ones(20), np.arange(21, 41), np.ones(20))
        assert p < 1e-6

    def test_no_events(self):
        with pytest.raises(UndefinedStatisticError):
            log_rank_test([1.0, 2.0], [0, 0], [1.5], [0])

    def test_hand_computed_two_by_two(self):
        # A: events at 1, 3; B: event at 2, censored at 4
        # t=1: n=(2,2) d=1 -> E=0.5, V=0.25; t=2: n=(1,2) d=1 -> E=1/3, V=2/9
        # t=3: n=(1,1) d=1 -> E=0.5, V=0.25. O=2, E=4/3, V=13/18
        chi2, _ = log_rank_test([1.0, 3.0], [1, 1], [2.0, 4.0], [1, 0])
        assert chi2 == pytest.approx((2 - 4 / 3) ** 2 / (13 / 18), abs=1e-14)


class TestChiSquareTail:
    def test_critical_value(self):
        assert abs(chi2_sf(3.841, 1) - 0.05) < 1e-3

    @pytest.mark.parametrize("x", [1e-6, 0.01, 0.5, 1.0, 3.841, 6.63, 10.0, 30.0, 80.0])
    def test_against_erfc(self, x):
        assert chi2_sf(x, 1) == pytest.approx(chi2_1_sf_erfc(x), rel=1e-10, abs=1e-300)

    def test_against_scipy(self):
        special = pytest.importorskip("scipy.special")
        for a in (0.5, 1.0, 2.5, 7.0, 40.0):
            for x in (0.1, 1.0, 5.0, 20.0, 60.0):
                assert gammaincc(a, x) == pytest.approx(float(special.gammaincc(a, x)),
                                                        rel=1e-10, abs=1e-280)

    def test_edges(self):
        assert chi2_sf(0.0, 1) == 1.0
        with pytest.raises(ValueError):
            gammaincc(0.0, 1.0)
