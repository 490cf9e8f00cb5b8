"""Monte-Carlo accountant: sensitivity estimation, moment costs, tail bound."""

import math

import numpy as np
import pytest

from fedsurv.network import HazardNetwork
from fedsurv.privacy import (
    BdpConfig,
    BdpLedger,
    RdpLedger,
    bdp_finalize,
    bdp_step_cost,
    mc_sensitivity,
    moment_costs,
    rdp_to_dp,
    subsampled_gaussian_rdp,
)
from fedsurv.rng import derive_rng


def flat_model():
    # single unit, zero parameters: hazard 0.5 everywhere, gradients are
    # (0.5 x, 0.5) for a survived interval and (-0.5 x, -0.5) for a failure
    return HazardNetwork((1, 1), np.zeros(2))


class TestMcSensitivity:
    def test_identical_replacement_gives_zero(self):
        model = flat_model()
        x = np.array([[1.0]])
        s = np.array([[1]], dtype=np.int8)
        f = np.array([[0]], dtype=np.int8)
        deltas = mc_sensitivity(model, x, s, f, x, s, f, 6, 1.0, derive_rng(0))
        np.testing.assert_array_equal(deltas, np.zeros(6))

    def test_two_point_hand_calculation(self):
        # batch record (x=1, survived) vs pool record (x=1, failed):
        # gradients (0.5, 0.5) and (-0.5, -0.5), both inside the clip ball,
        # so the squared distance is 1^2 + 1^2 = 2
        model = flat_model()
        bx = np.array([[1.0]])
        bs, bf = np.array([[1]], dtype=np.int8), np.array([[0]], dtype=np.int8)
        px = np.array([[1.0]])
        ps, pf = np.array([[0]], dtype=np.int8), np.array([[1]], dtype=np.int8)
        deltas = mc_sensitivity(model, bx, bs, bf, px, ps, pf, 4, 1.0, derive_rng(1))
        np.testing.assert_allclose(deltas, 2.0, rtol=1e-12)

    def test_triangle_bound_over_random_draws(self):
        rng = derive_rng(2)
        model = HazardNetwork.initialize((3, 5, 2), derive_rng(3))
        n, clip_norm = 8, 0.7
        x = rng.normal(size=(n, 3)) * 5
        s = rng.integers(0, 2, size=(n, 2)).astype(np.int8)
        f = np.zeros((n, 2), dtype=np.int8)
        pool_x = rng.normal(size=(30, 3)) * 5
        pool_s = rng.integers(0, 2, size=(30, 2)).astype(np.int8)
        pool_f = np.zeros((30, 2), dtype=np.int8)
        deltas = mc_sensitivity(
            model, x, s, f, pool_x, pool_s, pool_f, 50, clip_norm, derive_rng(4)
        )
        assert np.all(deltas <= (2 * clip_norm / n) ** 2 + 1e-12)

    def test_empty_pool_rejected(self):
        model = flat_model()
        x = np.array([[1.0]])
        s = np.array([[1]], dtype=np.int8)
        f = np.array([[0]], dtype=np.int8)
        with pytest.raises(ValueError):
            mc_sensitivity(
                model, x, s, f, np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)),
                4, 1.0, derive_rng(5),
            )


class TestMomentCosts:
    def test_order_one_left_expectation_three_terms(self):
        q, d, sigma = 0.25, 1.3, 0.9
        left, _ = moment_costs(d, 1, q, sigma)
        # K ~ Bin(2, q), (K^2-K)/2 in {0, 0, 1}
        expected = math.log(
            (1 - q) ** 2 + 2 * q * (1 - q) + q**2 * math.exp(d / sigma**2)
        )
        assert left == pytest.approx(expected, rel=1e-12)

    def test_zero_deviation_costs_nothing(self):
        assert moment_costs(0.0, 4, 0.3, 1.0) == (0.0, 0.0)

    def test_right_dominates_left_for_small_q(self):
        left, right = moment_costs(0.5, 8, 0.01, 1.0)
        assert right > left

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            moment_costs(-1.0, 2, 0.1, 1.0)
        with pytest.raises(ValueError):
            moment_costs(float("nan"), 2, 0.1, 1.0)
        with pytest.raises(ValueError):
            moment_costs(1.0, 0, 0.1, 1.0)


class TestStepCost:
    def test_all_zero_deviations_cost_zero(self):
        assert bdp_step_cost(np.zeros(10), 8, 0.1, 1.0, 0.01) == 0.0

    def test_strictly_decreasing_in_sigma(self):
        deltas = np.full(10, 0.2)
        sigmas = np.linspace(0.5, 5.0, 10)
        costs = [bdp_step_cost(deltas, 4, 0.05, s, 0.01) for s in sigmas]
        assert all(a > b for a, b in zip(costs, costs[1:]))

    def test_increasing_in_deviation(self):
        values = np.linspace(0.0, 1.0, 10)
        costs = [
            bdp_step_cost(np.full(10, d), 4, 0.05, 1.0, 0.01) for d in values
        ]
        assert all(a < b for a, b in zip(costs, costs[1:]))

    def test_ucb_of_constants_is_the_constant(self):
        deltas = np.full(10, 0.3)
        single = max(moment_costs(0.3, 4, 0.05, 1.0))
        assert bdp_step_cost(deltas, 4, 0.05, 1.0, 0.01) == pytest.approx(
            single, rel=1e-12
        )

    def test_small_sample_reports_at_least_the_max(self):
        deltas = np.array([0.01, 0.8])
        cost = bdp_step_cost(deltas, 4, 0.05, 1.0, 0.4)
        worst = max(moment_costs(0.8, 4, 0.05, 1.0))
        assert cost >= worst - 1e-12

    def test_large_deviations_do_not_overflow(self):
        cost = bdp_step_cost(np.full(10, 500.0), 32, 0.5, 0.5, 0.01)
        assert math.isfinite(cost)

    def test_non_finite_deviation_rejected(self):
        with pytest.raises(ValueError):
            bdp_step_cost(np.array([0.1, math.inf]), 4, 0.05, 1.0, 0.01)


class TestLedgerAndFinalize:
    def test_zero_cost_finalize_closed_form(self):
        ledger = BdpLedger()
        for _ in range(7):
            ledger.step(np.zeros(10), 0.02, 1.0, 5e-6)
        spend = bdp_finalize(ledger, 1e-5, 5e-6)
        assert spend.epsilon == math.log(1e5) / 32
        assert spend.order == 32
        assert spend.delta == pytest.approx(1e-5 + 5e-6)

    def test_linear_costs_minimized_at_max_order(self):
        lambdas = (2, 4, 8, 16, 32)
        ledger = BdpLedger(lambdas=lambdas, costs=np.array(lambdas, dtype=float))
        spend = bdp_finalize(ledger, 1e-5, 5e-6)
        assert spend.epsilon == pytest.approx(1 + math.log(1e5) / 32, rel=1e-12)
        assert spend.order == 32

    def test_finalize_monotone_in_every_cost(self):
        ledger = BdpLedger()
        ledger.step(np.full(10, 0.1), 0.05, 1.0, 5e-6)
        base = bdp_finalize(ledger, 1e-5, 5e-6).epsilon
        for i in range(len(ledger.lambdas)):
            bumped = ledger.copy()
            bumped.costs[i] += 0.3
            assert bdp_finalize(bumped, 1e-5, 5e-6).epsilon >= base

    def test_split_composition_is_exact(self):
        deltas = [np.full(10, 0.05 * (i % 3)) for i in range(20)]
        one = BdpLedger()
        for d in deltas:
            one.step(d, 0.05, 1.0, 5e-6)
        split = BdpLedger()
        for d in deltas[:11]:
            split.step(d, 0.05, 1.0, 5e-6)
        for d in deltas[11:]:
            split.step(d, 0.05, 1.0, 5e-6)
        np.testing.assert_array_equal(one.costs, split.costs)

    def test_deviation_stats_tracked(self):
        ledger = BdpLedger()
        ledger.step(np.array([0.1, 0.4]), 0.05, 1.0, 5e-6)
        ledger.step(np.array([0.2, 0.05]), 0.05, 1.0, 5e-6)
        assert ledger.max_delta == 0.4
        assert ledger.mean_delta == pytest.approx(0.1875)
        ledger.worst_case_delta = 4.0
        assert ledger.worst_case_fraction == pytest.approx(0.1)


class TestAgainstClassical:
    """Cross-accountant comparisons on the shared order grid at L = 1,
    where replacement (2C) and add/remove (C) sensitivities are directly
    comparable."""

    ORDERS = (2, 4, 8, 16, 32)

    def _classical(self, q, sigma, steps, delta=1e-5):
        costs = steps * np.array(
            [subsampled_gaussian_rdp(q, sigma, a) for a in self.ORDERS]
        )
        return rdp_to_dp(RdpLedger(self.ORDERS, costs, steps), delta).epsilon

    def _bayesian(self, delta_sq, q, sigma, steps, beta=5e-6, gamma=5e-6):
        ledger = BdpLedger(lambdas=self.ORDERS)
        deltas = np.full(10, delta_sq)
        ledger.step(deltas, q, sigma, gamma)
        ledger.costs *= steps  # homogeneous steps compose linearly
        ledger.steps = steps
        return bdp_finalize(ledger, beta, gamma).epsilon

    def test_small_deviations_beat_classical(self):
        # deviations at 1% of the worst case (2C)^2 with C = 1
        q, sigma, steps = 0.05, 2.0, 1000
        eps_bdp = self._bayesian(0.04, q, sigma, steps)
        eps_cl = self._classical(q, sigma, steps)
        assert eps_bdp < eps_cl

    def test_worst_case_within_constant_factor(self):
        # worst-case replacement deviation (2C)^2 = 4: the moment exponent is
        # exactly 4x the add/remove exponent, so composed budgets stay within
        # a fixed band at fixed (q, sigma, steps)
        q, sigma, steps = 0.05, 2.0, 1000
        eps_bdp = self._bayesian(4.0, q, sigma, steps)
        eps_cl = self._classical(q, sigma, steps)
        assert eps_cl / 50 <= eps_bdp <= 50 * eps_cl


def test_config_validation():
    with pytest.raises(ValueError):
        BdpConfig(lambda_grid=()).validate()
    with pytest.raises(ValueError):
        BdpConfig(lambda_grid=(1, 2)).validate()
    with pytest.raises(ValueError):
        BdpConfig(beta=0.7, gamma=0.5).validate()
    with pytest.raises(ValueError):
        BdpConfig(mc_samples=1).validate()
    BdpConfig().validate()
