"""Independent verification oracles: DP minima, policy evaluation, brackets."""

import numpy as np
import pytest

import fogctl as fc

from reference import (
    closed_form_cost,
    make_regime,
    random_delay,
    random_model,
    random_sticky_pair,
    scalar_fixture,
)


class TestPathEnumeration:
    def test_probabilities_sum_to_one(self, rng):
        for _ in range(10):
            p, q = rng.uniform(0.05, 0.95, size=2)
            chain = fc.ReliabilityChain(p=float(p), q=float(q), tau0=1)
            N = int(rng.integers(1, 7))
            paths = fc.enumerate_tau_paths(N, chain)
            assert sum(pp.probability for pp in paths) == pytest.approx(1.0, abs=1e-12)
            assert len(paths) <= 2 ** N

    def test_deterministic_chain_single_path(self):
        chain = fc.ReliabilityChain(p=1.0, q=1.0, tau0=1)
        paths = fc.enumerate_tau_paths(5, chain)
        assert len(paths) == 1
        assert paths[0].states == (1, 1, 1, 1, 1)
        assert paths[0].probability == pytest.approx(1.0)

    def test_zero_probability_paths_skipped(self):
        chain = fc.ReliabilityChain(p=1.0, q=0.5, tau0=1)  # ON is absorbing
        paths = fc.enumerate_tau_paths(4, chain)
        assert all(pp.states == (1, 1, 1, 1) for pp in paths)

    def test_horizon_guard(self):
        chain = fc.symmetric_chain(0.5)
        with pytest.raises(fc.ModelValidationError, match="limited to N <= 16"):
            fc.enumerate_tau_paths(17, chain)


class TestBruteForceMinimum:
    def test_scalar_hand_value_perfect(self):
        model, x0 = scalar_fixture(N=1)
        got = fc.brute_force_min_cost(model, fc.symmetric_chain(1.0), None, x0)
        assert got == pytest.approx(2.5, abs=1e-12)

    def test_scalar_hand_value_delayed(self):
        model, x0 = scalar_fixture(N=3)
        got = fc.brute_force_min_cost(
            model, fc.symmetric_chain(1.0), fc.DelayProfile(M_F=1, M_B=1), x0
        )
        assert got == pytest.approx(9.5, abs=1e-12)

    def test_matches_closed_form_perfect(self, rng):
        for _ in range(15):
            model, x0 = random_model(rng, N_low=3, N_high=7)
            p = float(rng.uniform(0.05, 1.0))
            tau0 = int(rng.integers(0, 2))
            want = closed_form_cost(model, p, None, "full", x0, tau0=tau0).total
            got = fc.brute_force_min_cost(
                model, fc.symmetric_chain(p, tau0=tau0), None, x0
            )
            assert got == pytest.approx(want, rel=1e-10)

    def test_matches_closed_form_delayed(self, rng):
        for _ in range(15):
            model, x0 = random_model(rng, N_low=4, N_high=8)
            delay = random_delay(rng, model.N)
            p = float(rng.uniform(0.05, 1.0))
            want = closed_form_cost(model, p, delay, "full", x0).total
            got = fc.brute_force_min_cost(model, fc.symmetric_chain(p), delay, x0)
            assert got == pytest.approx(want, rel=1e-10)

    def test_delayed_closed_form_exact_at_backward_only_delay_when_stationary(self, rng):
        # M_F = 0 leaves the first gate correlated with tau0; starting the
        # chain at its stationary law restores the closed form exactly
        model, x0 = random_model(rng, N_low=5, N_high=8)
        delay = fc.DelayProfile(M_F=0, M_B=2)
        p = 0.6
        chain = fc.ReliabilityChain(p=p, q=1 - p, tau0=(1 - p, p))
        want = closed_form_cost(model, p, delay, "full", x0).total
        got = fc.brute_force_min_cost(model, chain, delay, x0)
        assert got == pytest.approx(want, rel=1e-10)

    def test_asymmetric_chain_bracketed_by_symmetric_twins(self, rng):
        for _ in range(10):
            model, x0 = random_model(rng, N_low=3, N_high=6)
            p, q = random_sticky_pair(rng)
            chain = fc.ReliabilityChain(p=p, q=q, tau0=1)
            mid = fc.brute_force_min_cost(model, chain, None, x0)
            lo = fc.brute_force_min_cost(model, fc.symmetric_chain(p), None, x0)
            hi = fc.brute_force_min_cost(model, fc.symmetric_chain(1 - q), None, x0)
            assert lo - 1e-9 <= mid <= hi + 1e-9

    def test_scope_guards(self, rng):
        model, x0 = scalar_fixture(N=3)
        chain = fc.symmetric_chain(0.5)
        with pytest.raises(fc.ModelValidationError, match="full observation only"):
            fc.brute_force_min_cost(model, chain, None, x0, observation="partial")
        drifty = fc.make_system(
            A=1.0, B=1.0, Q=1.0, R=1.0, W=1.0, drift=np.array([[1.0]]), N=1
        )
        with pytest.raises(fc.ModelValidationError, match="drift"):
            fc.brute_force_min_cost(drifty, chain, None, np.zeros(1))
        long_model, _ = scalar_fixture(N=17)
        with pytest.raises(fc.ModelValidationError, match="N <= 16"):
            fc.brute_force_min_cost(long_model, chain, None, np.zeros(1))
        with pytest.raises(fc.ModelValidationError, match="horizon shorter"):
            fc.brute_force_min_cost(
                model, chain, fc.DelayProfile(M_F=2, M_B=2), x0
            )


class TestPolicyEvaluation:
    def test_optimal_policy_attains_dp_minimum_perfect(self, rng):
        for _ in range(10):
            model, x0 = random_model(rng, N_low=3, N_high=6)
            p = float(rng.uniform(0.1, 1.0))
            chain = fc.symmetric_chain(p)
            policy = make_regime(model, p, None)
            val = fc.evaluate_policy_cost(model, chain, None, policy, x0)
            opt = fc.brute_force_min_cost(model, chain, None, x0)
            assert val == pytest.approx(opt, rel=1e-9)

    def test_optimal_policy_attains_dp_minimum_delayed(self, rng):
        for _ in range(10):
            model, x0 = random_model(rng, N_low=4, N_high=8)
            delay = random_delay(rng, model.N)
            p = float(rng.uniform(0.1, 1.0))
            chain = fc.symmetric_chain(p)
            policy = make_regime(model, p, delay)
            val = fc.evaluate_policy_cost(model, chain, delay, policy, x0)
            opt = fc.brute_force_min_cost(model, chain, delay, x0)
            assert val == pytest.approx(opt, rel=1e-9)

    def test_moments_equal_enumeration(self, rng):
        for _ in range(8):
            model, x0 = random_model(rng, N_low=3, N_high=6)
            p, q = rng.uniform(0.1, 0.95, size=2)
            chain = fc.ReliabilityChain(p=float(p), q=float(q), tau0=1)
            policy = make_regime(model, 0.5, None)
            a = fc.evaluate_policy_cost(model, chain, None, policy, x0, method="moments")
            b = fc.evaluate_policy_cost(model, chain, None, policy, x0, method="enumeration")
            assert a == pytest.approx(b, rel=1e-10)

    def test_mistuned_policy_never_beats_dp(self, rng):
        for _ in range(10):
            model, x0 = random_model(rng, N_low=3, N_high=6)
            p = float(rng.uniform(0.1, 0.9))
            wrong = float(rng.uniform(0.1, 1.0))
            chain = fc.symmetric_chain(p)
            policy = make_regime(model, wrong, None)
            val = fc.evaluate_policy_cost(model, chain, None, policy, x0)
            opt = fc.brute_force_min_cost(model, chain, None, x0)
            assert val >= opt - 1e-9

    def test_delay_mismatch_rejected(self):
        model, x0 = scalar_fixture(N=4)
        chain = fc.symmetric_chain(0.5)
        policy = make_regime(model, 0.5, fc.DelayProfile(M_F=1, M_B=1))
        with pytest.raises(fc.ModelValidationError, match="delay M=0 but policy gains"):
            fc.evaluate_policy_cost(model, chain, None, policy, x0)

    def test_enumeration_rejected_for_delayed(self):
        model, x0 = scalar_fixture(N=4)
        delay = fc.DelayProfile(M_F=1, M_B=1)
        policy = make_regime(model, 0.5, delay)
        with pytest.raises(fc.ModelValidationError, match="zero-delay loop only"):
            fc.evaluate_policy_cost(
                model, fc.symmetric_chain(0.5), delay, policy, x0, method="enumeration"
            )

    def test_unknown_method_rejected(self):
        model, x0 = scalar_fixture(N=3)
        policy = make_regime(model, 0.5, None)
        with pytest.raises(fc.ModelValidationError, match="unknown evaluation method"):
            fc.evaluate_policy_cost(
                model, fc.symmetric_chain(0.5), None, policy, x0, method="psychic"
            )


class TestBoundCheck:
    def test_holds_on_random_sticky_instances(self, rng):
        for _ in range(15):
            model, x0 = random_model(rng, N_low=3, N_high=7)
            p, q = random_sticky_pair(rng)
            out = fc.bound_check(model, p, q, None, "full-perfect", x0=x0)
            assert out["holds"], out
            assert out["method"] == "exact"
            assert out["lower"] <= out["upper"] + 1e-12

    def test_holds_delayed(self, rng):
        for _ in range(8):
            model, x0 = random_model(rng, N_low=4, N_high=8)
            delay = random_delay(rng, model.N)
            p, q = random_sticky_pair(rng)
            out = fc.bound_check(model, p, q, delay, "full-delayed", x0=x0)
            assert out["holds"], out

    def test_monte_carlo_fallback_above_oracle_scope(self):
        model, x0 = scalar_fixture(N=18)
        out = fc.bound_check(
            model, 0.9, 0.4, None, "full-perfect", x0=x0,
            config={"replications": 4000, "seed": 5},
        )
        assert out["method"] == "monte-carlo"
        assert out["holds"], out
        assert out["tolerance"] > 1e-9

    def test_symmetric_chain_rejected(self):
        model, _ = scalar_fixture(N=3)
        with pytest.raises(fc.ModelValidationError, match="sandwich hypotheses violated"):
            fc.bound_check(model, 0.5, 0.5, None, "full-perfect")

    def test_regime_and_delay_consistency(self):
        model, _ = scalar_fixture(N=4)
        delay = fc.DelayProfile(M_F=1, M_B=1)
        with pytest.raises(fc.ModelValidationError, match="unknown regime"):
            fc.bound_check(model, 0.9, 0.3, None, "half-baked")
        with pytest.raises(fc.ModelValidationError, match="requires a delay profile"):
            fc.bound_check(model, 0.9, 0.3, None, "full-delayed")
        with pytest.raises(fc.ModelValidationError, match="matched regime given"):
            fc.bound_check(model, 0.9, 0.3, delay, "full-perfect")

    def test_unknown_config_key_rejected(self):
        model, _ = scalar_fixture(N=3)
        with pytest.raises(fc.ModelValidationError, match="unknown bound_check config"):
            fc.bound_check(model, 0.9, 0.3, None, "full-perfect", config={"reps": 3})
