"""Release gate: one test per advertised guarantee.

Each test exercises one externally stated property of the toolkit end to
end, at the tolerance the guarantee is published with. Keep one guarantee
per test so `pytest -v` reads as a checklist.
"""

import json

import numpy as np
import pytest

import fogctl as fc
from fogctl import cli
from reference import (
    closed_form_cost,
    make_regime,
    random_delay,
    random_model,
    random_sticky_pair,
    scalar_fixture,
    textbook_riccati,
)


def _symmetric(rng, low=0.05, high=1.0):
    return float(rng.uniform(low, high))


def test_01_closed_form_matches_oracle():
    """Exact minimum costs agree with brute-force dynamic programming."""
    rng = np.random.default_rng(101)
    checked = 0
    worst = 0.0
    while checked < 200:
        model, x0 = random_model(rng, N_low=3, N_high=8)
        p = _symmetric(rng)
        tau0 = int(rng.integers(0, 2))
        use_delay = checked % 2 == 1
        chain = fc.symmetric_chain(p)
        if use_delay:
            delay = random_delay(rng, model.N)
            oracle = fc.brute_force_min_cost(model, chain, delay, x0, tau0=1)
            closed = closed_form_cost(model, p, delay, "full", x0, tau0=1)
        else:
            oracle = fc.brute_force_min_cost(model, chain, None, x0, tau0=tau0)
            closed = closed_form_cost(model, p, None, "full", x0, tau0=tau0)
        rel = abs(closed.total - oracle) / max(1.0, abs(oracle))
        worst = max(worst, rel)
        assert rel <= 1e-8, f"model {checked}: rel error {rel:.3e}"
        checked += 1
    assert checked >= 200 and worst <= 1e-8


def test_02_monte_carlo_matches_closed_form():
    """Closed-loop sample means land on the exact costs, all four regimes."""
    model, x0 = scalar_fixture()
    chain = fc.symmetric_chain(1.0, tau0=1)
    regime = make_regime(model, 1.0, None)
    res = fc.run(
        model, chain, None, regime,
        fc.SimulationConfig(replications=100_000, master_seed=0), x0=x0,
    )
    assert abs(res["mean_cost"] - 2.5) <= 3 * res["std_error"]

    rng = np.random.default_rng(202)
    cases = [
        ("full", False), ("partial", False), ("full", True), ("partial", True)
    ]
    for observation, delayed in cases:
        for i in range(20):
            model, x0 = random_model(
                rng, N_low=3, N_high=6, partial=(observation == "partial")
            )
            delay = random_delay(rng, model.N) if delayed else None
            p = _symmetric(rng, low=0.1)
            chain = fc.symmetric_chain(p, tau0=1)
            closed = closed_form_cost(model, p, delay, observation, x0)
            regime = make_regime(model, p, delay, observation)
            res = fc.run(
                model, chain, delay, regime,
                fc.SimulationConfig(replications=100_000, master_seed=i),
                x0=x0,
            )
            gap = abs(res["mean_cost"] - closed.total)
            slack = 3 * res["std_error"] + 1e-9
            assert gap <= slack, (
                f"{observation} delayed={delayed} fixture {i}: "
                f"gap {gap:.4e} > {slack:.4e}"
            )


def test_03_sandwich_bounds_hold():
    """Sticky chains are bracketed by their symmetric twins, no violations."""
    rng = np.random.default_rng(303)
    results = []
    for i in range(200):
        if i % 10 == 8:
            observation, delayed = "partial", False
        elif i % 10 == 9:
            observation, delayed = "partial", True
        else:
            observation, delayed = "full", i % 3 == 0
        model, x0 = random_model(
            rng, N_low=3, N_high=6, partial=(observation == "partial")
        )
        delay = random_delay(rng, model.N) if delayed else None
        p, q = random_sticky_pair(rng)
        regime = ("partial-" if observation == "partial" else "full-") + (
            "delayed" if delayed else "perfect"
        )
        out = fc.bound_check(
            model, p, q, delay, regime, x0=x0,
            config={"replications": 20_000, "seed": i},
        )
        results.append(out)
        assert out["holds"], f"instance {i} ({regime}): bracket violated"
    assert len(results) >= 200
    assert sum(r["method"] == "exact" for r in results) >= 150


def test_04_classical_reduction():
    """Always-on, zero-delay, noiseless gains equal the textbook recursion."""
    rng = np.random.default_rng(404)
    for _ in range(25):
        model, _ = random_model(rng)
        sched = fc.backward_recursion_perfect(model, 1.0)
        P_ref, F_ref = textbook_riccati(
            [np.asarray(a) for a in model.A],
            [np.asarray(b) for b in model.B],
            [np.asarray(q) for q in model.Q[:-1]],
            [np.asarray(r) for r in model.R],
            np.asarray(model.Q[model.N]),
            model.N,
        )
        for k in range(model.N + 1):
            np.testing.assert_allclose(sched.K[k], P_ref[k], atol=1e-10)
        for k in range(model.N):
            np.testing.assert_allclose(sched.V[k], F_ref[k], atol=1e-10)


def test_05_psd_and_structure_invariants():
    """Schedule matrices stay symmetric PSD; off-grid stages reuse L as K."""
    rng = np.random.default_rng(505)

    def check_psd(mats):
        for X in mats:
            X = np.asarray(X)
            assert np.allclose(X, X.T, atol=1e-12)
            assert np.linalg.eigvalsh(X).min() >= -1e-9

    for i in range(40):
        model, _ = random_model(rng)
        p = _symmetric(rng)
        sched = fc.backward_recursion_perfect(model, p)
        check_psd(sched.K)
        check_psd(sched.L)
        check_psd(sched.Lambda)
        delay = random_delay(rng, model.N)
        dsched = fc.backward_recursion_delayed(model, p, delay)
        check_psd(dsched.K)
        check_psd(dsched.P)
        for k in range(model.N):
            if k % delay.M != 0:
                assert dsched.K[k] is dsched.L[k]


def test_06_disturbance_cost_nonincreasing_in_p():
    """More endpoint availability never raises the disturbance cost term."""
    model = fc.make_system(N=8, A=1.0, B=1.0, Q=1.0, R=1.0, W=1.0)
    totals = []
    for p in np.linspace(0.0, 1.0, 11):
        sched = fc.backward_recursion_perfect(model, float(p))
        totals.append(
            sum(float(np.trace(sched.K[k + 1] @ model.W[k])) for k in range(model.N))
        )
    diffs = np.diff(totals)
    assert np.all(diffs <= 0.0), f"increasing step found: {diffs}"


def test_07_tracking_study_directions():
    """Availability helps (no delay) and delay hurts, at three sigma."""
    plan = fc.WaypointPlan(
        approach_target=(5.0, 0.0), approach_stages=4,
        circle_radius=5.0, circle_stages=12, return_stages=4,
        circle_center=(0.0, 0.0),
    )
    scenario = fc.DroneScenario(waypoints=fc.make_waypoints(plan, 1.0))
    p_values = [0.25, 0.5, 0.75, 1.0]
    rows_m0 = fc.tracking_study(scenario, p_values, [None], replications=10_000)
    for lo, hi in zip(rows_m0[1:], rows_m0[:-1]):
        sigma = np.hypot(lo["mse_std_error"], hi["mse_std_error"])
        assert lo["mse_position_error"] <= hi["mse_position_error"] + 3 * sigma

    delay = fc.DelayProfile(M_F=2, M_B=1)
    rows_m3 = fc.tracking_study(scenario, [0.75], [delay], replications=10_000)
    base = rows_m0[p_values.index(0.75)]
    sigma = np.hypot(rows_m3[0]["mse_std_error"], base["mse_std_error"])
    assert rows_m3[0]["mse_position_error"] > base["mse_position_error"] + 3 * sigma


def test_08_collateral_sign():
    """Delay collateral is nonnegative, zero exactly when p=0 or W=0."""
    rng = np.random.default_rng(808)
    for _ in range(40):
        model, x0 = random_model(rng, N_low=3, N_high=8)
        delay = random_delay(rng, model.N)
        p = _symmetric(rng, low=0.05)
        cost = closed_form_cost(model, p, delay, "full", x0)
        assert cost.collateral_trace_sum > 0.0

        cost0 = closed_form_cost(model, 0.0, delay, "full", x0)
        assert cost0.collateral_trace_sum == 0.0

        n = model.state_dim
        quiet = fc.make_system(
            N=model.N, A=list(model.A), B=list(model.B), Q=list(model.Q),
            R=list(model.R), W=np.zeros((n, n)),
        )
        costw = closed_form_cost(quiet, p, delay, "full", x0)
        assert costw.collateral_trace_sum == 0.0


def test_09_simulation_summary_deterministic(tmp_path):
    """Repeated runs with one seed produce byte-identical summaries."""
    cfg = {
        "system": {"N": 5, "A": 1.0, "B": 1.0, "Q": 1.0, "R": 1.0, "W": 1.0,
                   "x0": [1.0]},
        "reliability": {"p": 0.7, "q": 0.3},
        "simulation": {
            "replications": 500,
            "master_seed": 11,
            "sweep": {"p": [0.4, 0.9], "M": [0, 2]},
        },
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["simulate", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        blobs.append((out / "summary.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_10_error_coordinates_consistent():
    """Error-form and raw-kinematics simulations agree under shared noise."""
    rng = np.random.default_rng(1010)
    for i in range(50):
        n_pts = int(rng.integers(6, 15))
        scenario = fc.DroneScenario(
            waypoints=rng.normal(size=(n_pts, 2)) * 5.0,
            delta_t=float(rng.uniform(0.3, 1.5)),
            alpha=float(rng.uniform(0.02, 0.8)),
            sigma_x=float(rng.uniform(0.02, 0.4)),
            sigma_v=float(rng.uniform(0.02, 0.4)),
            start_position=tuple(rng.normal(size=2)),
        )
        delay = (None, fc.DelayProfile(M_F=1, M_B=1), fc.DelayProfile(M_F=2, M_B=1))[i % 3]
        mode = ("paper-faithful", "affine-compensated")[i % 2]
        chain = fc.symmetric_chain(float(rng.uniform(0.1, 0.99)), tau0=1)
        out = fc.error_consistency_check(
            scenario, chain, delay, replications=3, master_seed=i, mode=mode
        )
        assert out["agree"], (
            f"scenario {i}: max diff {out['max_abs_difference']:.3e}"
        )
