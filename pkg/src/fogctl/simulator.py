"""Closed-loop Monte Carlo engine with the causal event ordering.

Per replication and stage: the measurement is generated at the plant, reaches
the controller after the forward delay, the availability chain is sampled on
the controller clock, and a generated control reaches the plant after the
backward delay. With zero delay this collapses into a single stage.

All replications run in lock step on vectorized arrays. Three independent
substreams (disturbance, measurement noise, chain) spawn from the master
seed, and every run draws the same fixed count of variates regardless of
regime, so runs with the same seed share noise realizations (common random
numbers across regime or parameter comparisons).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimation import transition_product, window_noise
from .model import (
    DelayProfile,
    LinearSystemModel,
    ModelValidationError,
    ReliabilityChain,
    symmetrize,
)
from .policy import ControllerRegime

NOISE_FAMILIES = ("gaussian",)
ESTIMATION_MODES = ("kalman",)


@dataclass(frozen=True)
class SimulationConfig:
    """Replication count, seeding, and recording options."""

    replications: int
    master_seed: int = 0
    noise: str = "gaussian"
    record_traces: bool = False
    estimation: str = "kalman"

    def __post_init__(self):
        violations = []
        if int(self.replications) < 1:
            violations.append(f"replications must be >= 1, got {self.replications}")
        if self.noise not in NOISE_FAMILIES:
            violations.append(f"unsupported noise family {self.noise!r}")
        if self.estimation not in ESTIMATION_MODES:
            violations.append(f"unsupported estimation mode {self.estimation!r}")
        if int(self.master_seed) < 0:
            violations.append("master_seed must be a nonnegative integer")
        if violations:
            raise ModelValidationError(violations)


@dataclass(frozen=True)
class StageRecord:
    """One stage of one replication."""

    k: int
    x: np.ndarray
    z: Optional[np.ndarray]
    tau: Optional[int]
    u: Optional[np.ndarray]
    x_hat: Optional[np.ndarray]
    cost: float


@dataclass(frozen=True)
class SimulationTrace:
    """Per-stage records of a single replication plus the terminal account."""

    records: tuple
    terminal_state: np.ndarray
    terminal_cost: float
    total: float

    def __post_init__(self):
        s = sum(r.cost for r in self.records) + self.terminal_cost
        if abs(s - self.total) > 1e-9 * max(1.0, abs(self.total)):
            raise ModelValidationError([f"trace total {self.total} != stage sum {s}"])


@dataclass(frozen=True)
class SimulationBatch:
    """Replication-major arrays recorded by a simulation run.

    x has N+1 stage slots (terminal state included); u, tau and x_hat have N.
    stage_cost's final column is the terminal cost. x_hat rows are NaN at
    stages where the controller held no estimate.
    """

    x: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    stage_cost: np.ndarray
    totals: np.ndarray
    x_hat: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None

    @property
    def replications(self) -> int:
        return self.x.shape[0]

    @property
    def N(self) -> int:
        return self.x.shape[1] - 1

    def trace(self, rep: int) -> SimulationTrace:
        N = self.N
        records = []
        for k in range(N):
            xh = None
            if self.x_hat is not None and not np.isnan(self.x_hat[rep, k]).any():
                xh = self.x_hat[rep, k]
            z = None if self.z is None else self.z[rep, k]
            records.append(
                StageRecord(
                    k=k, x=self.x[rep, k], z=z, tau=int(self.tau[rep, k]),
                    u=self.u[rep, k], x_hat=xh, cost=float(self.stage_cost[rep, k]),
                )
            )
        return SimulationTrace(
            records=tuple(records),
            terminal_state=self.x[rep, N],
            terminal_cost=float(self.stage_cost[rep, N]),
            total=float(self.totals[rep]),
        )

    def to_csv(self, fh) -> None:
        """Write `rep,k,tau,x...,u...,xhat...,cost_stage` rows.

        The estimate columns appear only when an estimator was active. The
        terminal row of each replication leaves tau, u (and xhat) empty.
        """
        n = self.x.shape[2]
        s = self.u.shape[2]
        with_xhat = self.x_hat is not None
        header = ["rep", "k", "tau"]
        header += [f"x{i}" for i in range(n)]
        header += [f"u{i}" for i in range(s)]
        if with_xhat:
            header += [f"xhat{i}" for i in range(n)]
        header.append("cost_stage")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        N = self.N
        for r in range(self.replications):
            for k in range(N):
                row = [r, k, int(self.tau[r, k])]
                row += [repr(float(v)) for v in self.x[r, k]]
                row += [repr(float(v)) for v in self.u[r, k]]
                if with_xhat:
                    if np.isnan(self.x_hat[r, k]).any():
                        row += [""] * n
                    else:
                        row += [repr(float(v)) for v in self.x_hat[r, k]]
                row.append(repr(float(self.stage_cost[r, k])))
                writer.writerow(row)
            row = [r, N, ""]
            row += [repr(float(v)) for v in self.x[r, N]]
            row += [""] * s
            if with_xhat:
                row += [""] * n
            row.append(repr(float(self.stage_cost[r, N])))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Noise plumbing
# ---------------------------------------------------------------------------

def psd_sqrt(X: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix (eigenvalues clipped at zero)."""
    vals, vecs = np.linalg.eigh(symmetrize(X))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def noise_streams(master_seed: int, R: int, N: int, n: int, m: int):
    """Standard-normal and uniform draws from three spawned substreams.

    The draw counts depend only on (R, N, n, m), never on the regime, so two
    runs with the same seed see identical realizations.
    """
    s_w, s_v, s_tau = np.random.SeedSequence(int(master_seed)).spawn(3)
    w_eps = np.random.default_rng(s_w).standard_normal((R, N, n))
    v_eps = np.random.default_rng(s_v).standard_normal((R, N, m))
    chain_u = np.random.default_rng(s_tau).random((R, N))
    return w_eps, v_eps, chain_u


def sample_tau(chain: ReliabilityChain, chain_u: np.ndarray) -> np.ndarray:
    """ON/OFF paths from pre-drawn uniforms, one column per stage."""
    R, N = chain_u.shape
    tau = np.empty((R, N), dtype=np.int8)
    if isinstance(chain.tau0, tuple):
        tau[:, 0] = chain_u[:, 0] < chain.tau0[1]
    else:
        tau[:, 0] = int(chain.tau0)
    p, q = chain.p, chain.q
    for k in range(1, N):
        tau[:, k] = np.where(tau[:, k - 1] == 1, chain_u[:, k] < p, chain_u[:, k] < 1.0 - q)
    return tau


def _batch_sym(X: np.ndarray) -> np.ndarray:
    return (X + np.swapaxes(X, -1, -2)) / 2.0


def _quad_rows(x: np.ndarray, Qmat: np.ndarray) -> np.ndarray:
    return np.einsum("ri,ij,rj->r", x, Qmat, x)


def _filter_update_rows(xh, Sg, z, C, V):
    """Batched Joseph-form measurement update (means and covariances)."""
    n = Sg.shape[-1]
    S = _batch_sym(np.matmul(np.matmul(C, Sg), C.T) + V)
    Sinv = np.linalg.pinv(S, hermitian=True)
    gain = np.matmul(np.matmul(Sg, C.T), Sinv)
    innov = z - xh @ C.T
    xh2 = xh + np.einsum("pnm,pm->pn", gain, innov)
    IKC = np.eye(n) - np.matmul(gain, C)
    Sg2 = np.matmul(np.matmul(IKC, Sg), np.swapaxes(IKC, -1, -2))
    Sg2 = Sg2 + np.matmul(np.matmul(gain, V), np.swapaxes(gain, -1, -2))
    return xh2, _batch_sym(Sg2)


# ---------------------------------------------------------------------------
# The engine
# ---------------------------------------------------------------------------

def run(
    model: LinearSystemModel,
    chain: ReliabilityChain,
    delay: Optional[DelayProfile],
    regime: ControllerRegime,
    config: SimulationConfig,
    x0: Optional[np.ndarray] = None,
) -> dict:
    """Simulate the closed loop and return empirical cost statistics.

    Args:
        model: the true plant (its drift, if any, acts on the plant; whether
            the controller also sees it is the regime's compensate_drift).
        chain: availability process, sampled on the controller clock.
        delay: transport delay; None or M = 0 for perfect match.
        regime: controller (observation mode, gains, delay, drift handling).
        config: replications, master seed, recording options.
        x0: known initial state (zeros when omitted).

    Returns:
        dict with mean_cost, std_error, and traces (a SimulationBatch when
        config.record_traces, else None).
    """
    N, n, m = model.N, model.state_dim, model.obs_dim
    eff_M = delay.M if delay is not None else 0
    reg_M = regime.delay.M if regime.delay is not None else 0
    if eff_M != reg_M:
        raise ModelValidationError(
            [f"configuration inconsistencies: delay M={eff_M} but regime gains built for M={reg_M}"]
        )
    if regime.gains.N != N:
        raise ModelValidationError(
            [f"configuration inconsistencies: gains horizon {regime.gains.N} != model horizon {N}"]
        )
    if eff_M >= 1 and N < eff_M:
        raise ModelValidationError(["horizon shorter than round-trip delay"])
    R = int(config.replications)
    if x0 is None:
        x0 = np.zeros(n)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (n,):
        raise ModelValidationError([f"x0 shape {x0.shape}, expected ({n},)"])

    w_eps, v_eps, chain_u = noise_streams(config.master_seed, R, N, n, m)
    tau = sample_tau(chain, chain_u)
    ctrl_model = model if regime.compensate_drift else model.without_drift()

    if eff_M >= 1:
        out = _run_delayed(model, ctrl_model, regime, tau, w_eps, v_eps, x0, config.record_traces)
    else:
        out = _run_perfect(model, ctrl_model, regime, tau, w_eps, v_eps, x0, config.record_traces)

    totals = out["totals"]
    mean_cost = float(totals.mean())
    std_error = float(totals.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0
    traces = None
    if config.record_traces:
        traces = SimulationBatch(
            x=out["x"], u=out["u"], tau=tau, stage_cost=out["stage_cost"],
            totals=totals, x_hat=out.get("x_hat"), z=out.get("z"),
        )
    return {"mean_cost": mean_cost, "std_error": std_error, "traces": traces}


def _run_perfect(model, ctrl_model, regime, tau, w_eps, v_eps, x0, record):
    N, n, s, m = model.N, model.state_dim, model.control_dim, model.obs_dim
    R = tau.shape[0]
    gains = regime.gains
    partial = regime.observation == "partial"
    Lw = [psd_sqrt(model.W[k]) for k in range(N)]
    Lv = [psd_sqrt(model.V_noise[k]) for k in range(N)] if partial else None

    x = np.broadcast_to(x0, (R, n)).copy()
    totals = np.zeros(R)
    if record:
        X = np.empty((R, N + 1, n))
        U = np.empty((R, N, s))
        G = np.empty((R, N + 1))
        XH = np.full((R, N, n), np.nan) if partial else None
        Z = np.empty((R, N, m)) if partial else None
    if partial:
        xh = np.broadcast_to(x0, (R, n)).copy()
        Sg = np.zeros((R, n, n))

    for k in range(N):
        on = tau[:, k] == 1
        u = np.zeros((R, s))
        if partial:
            z = x @ model.C[k].T + v_eps[:, k] @ Lv[k].T
            if on.any():
                xh_on, Sg_on = _filter_update_rows(
                    xh[on], Sg[on], z[on], model.C[k], model.V_noise[k]
                )
                xh[on] = xh_on
                Sg[on] = Sg_on
            u[on] = -(xh[on] @ gains.V[k].T)
        else:
            u[on] = -(x[on] @ gains.V[k].T)
        g = _quad_rows(x, model.Q[k]) + _quad_rows(u, model.R[k])
        totals += g
        if record:
            X[:, k] = x
            U[:, k] = u
            G[:, k] = g
            if partial:
                XH[:, k] = xh
                Z[:, k] = z
        x = x @ model.A[k].T + u @ model.B[k].T + (model.drift_at(k) + w_eps[:, k] @ Lw[k].T)
        if partial:
            xh = xh @ model.A[k].T + u @ model.B[k].T + ctrl_model.drift_at(k)
            A = model.A[k]
            Sg = _batch_sym(np.matmul(np.matmul(A, Sg), A.T) + model.W[k])

    g_term = _quad_rows(x, model.Q[N])
    totals = totals + g_term
    out = {"totals": totals}
    if record:
        X[:, N] = x
        G[:, N] = g_term
        out.update({"x": X, "u": U, "stage_cost": G})
        if partial:
            out.update({"x_hat": XH, "z": Z})
    return out


def _propagate_mean_rows(ctrl_model, base, u_first, t0, t1):
    """Rows of E[x_{t1} | x_{t0} = row, u_{t0} = u-row, no later control]."""
    mean = base @ ctrl_model.A[t0].T + u_first @ ctrl_model.B[t0].T + ctrl_model.drift_at(t0)
    for t in range(t0 + 1, t1):
        mean = mean @ ctrl_model.A[t].T + ctrl_model.drift_at(t)
    return mean


def _run_delayed(model, ctrl_model, regime, tau, w_eps, v_eps, x0, record):
    N, n, s, m = model.N, model.state_dim, model.control_dim, model.obs_dim
    R = tau.shape[0]
    gains = regime.gains
    partial = regime.observation == "partial"
    delay = regime.delay.bound_to(N)
    M, M_F, c = delay.M, delay.M_F, delay.c
    Lw = [psd_sqrt(model.W[k]) for k in range(N)]
    Lv = [psd_sqrt(model.V_noise[k]) for k in range(N)] if partial else None
    services = {j * M + M_F: j for j in range(c)}

    x = np.broadcast_to(x0, (R, n)).copy()
    totals = np.zeros(R)
    if record:
        X = np.empty((R, N + 1, n))
        U = np.empty((R, N, s))
        G = np.empty((R, N + 1))
        XH = np.full((R, N, n), np.nan) if partial else None
        Z = np.full((R, N, m), np.nan) if partial else None
    saved = {}       # epoch j -> state (full) or measurement (partial) at stage jM
    pending = {}     # arrival stage -> control awaiting application
    applied_at = {}  # arrival stage -> control actually applied there
    if partial:
        xh_b = np.broadcast_to(x0, (R, n)).copy()   # boundary estimate
        Sg_b = np.zeros((R, n, n))

    def control_at_boundary(t):
        if t == 0:
            return np.zeros((R, s))
        if t in applied_at:
            return applied_at[t]
        return pending.get(t, np.zeros((R, s)))  # M_B = 0: same-stage service

    for k in range(N):
        j_b = k // M
        if k % M == 0 and j_b < c:
            if partial:
                zb = x @ model.C[k].T + v_eps[:, k] @ Lv[k].T
                saved[j_b] = zb
                if record:
                    Z[:, k] = zb
            else:
                saved[j_b] = x.copy()
        if k in services:
            j = services[k]
            t0, t1 = j * M, (j + 1) * M
            gate = tau[:, k] == 1
            u_win = control_at_boundary(t0)
            if partial:
                if j >= 1:
                    u_prev = control_at_boundary((j - 1) * M)
                    xh_b = _propagate_mean_rows(ctrl_model, xh_b, u_prev, (j - 1) * M, t0)
                    Phi_w = transition_product(model, t0, (j - 1) * M)
                    Xi_w = window_noise(model, (j - 1) * M, t0)
                    Sg_b = _batch_sym(np.matmul(np.matmul(Phi_w, Sg_b), Phi_w.T) + Xi_w)
                    if gate.any():
                        xh_on, Sg_on = _filter_update_rows(
                            xh_b[gate], Sg_b[gate], saved[j][gate],
                            model.C[t0], model.V_noise[t0],
                        )
                        xh_b[gate] = xh_on
                        Sg_b[gate] = Sg_on
                if record:
                    XH[:, t0] = xh_b
                mean = _propagate_mean_rows(ctrl_model, xh_b, u_win, t0, t1)
            else:
                mean = _propagate_mean_rows(ctrl_model, saved[j], u_win, t0, t1)
            u_new = -(mean @ gains.V[t1].T)
            u_new[~gate] = 0.0
            pending[t1] = u_new
        u = pending.pop(k, None)
        if u is None:
            u = np.zeros((R, s))
        else:
            applied_at[k] = u
        g = _quad_rows(x, model.Q[k]) + _quad_rows(u, model.R[k])
        totals += g
        if record:
            X[:, k] = x
            U[:, k] = u
            G[:, k] = g
        x = x @ model.A[k].T + u @ model.B[k].T + (model.drift_at(k) + w_eps[:, k] @ Lw[k].T)

    g_term = _quad_rows(x, model.Q[N])
    totals = totals + g_term
    out = {"totals": totals}
    if record:
        X[:, N] = x
        G[:, N] = g_term
        out.update({"x": X, "u": U, "stage_cost": G})
        if partial:
            out.update({"x_hat": XH, "z": Z})
    return out


def tracking_metrics(batch: SimulationBatch, alpha: float) -> dict:
    """Tracking-quality summary for the planar error-state layout.

    Returns the RMS (over stages and replications) of the position error
    norm, the mean total control-plus-velocity energy, and the maximum
    position deviation. Also reports the mean squared position error with
    its standard error, which is what statistical comparisons should use.

    Raises:
        ModelValidationError: unless the state is 4-dimensional (position
            error stacked on velocity) with 2-dimensional control.
    """
    if batch.x.shape[2] != 4 or batch.u.shape[2] != 2:
        raise ModelValidationError(
            ["tracking metrics require the planar error-state layout (4-dim state, 2-dim control)"]
        )
    e2 = batch.x[:, :, 0] ** 2 + batch.x[:, :, 1] ** 2
    mse_rep = e2.mean(axis=1)
    R = mse_rep.shape[0]
    mse = float(mse_rep.mean())
    mse_se = float(mse_rep.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0
    v2 = (batch.x[:, :, 2] ** 2 + batch.x[:, :, 3] ** 2).sum(axis=1)
    u2 = (batch.u[:, :, 0] ** 2 + batch.u[:, :, 1] ** 2).sum(axis=1)
    energy_rep = alpha * (v2 + u2)
    return {
        "rms_position_error": float(np.sqrt(mse)),
        "mean_control_energy": float(energy_rep.mean()),
        "max_deviation": float(np.sqrt(e2.max())),
        "mse_position_error": mse,
        "mse_std_error": mse_se,
    }
