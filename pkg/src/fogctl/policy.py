"""The optimal control laws for the four regimes, plus the sandwich policy.

Every law is linear feedback through the schedule's gains, gated by the
endpoint's availability at the moment the control is generated. Delayed
regimes act only on the arrival grid (stages divisible by M) and never emit a
control at stage 0.

The sandwich policy runs the symmetric-chain gains computed at the pessimistic
parameter p' = 1 - q on an asymmetric chain with p > 1 - q; its expected cost
is bracketed by the two symmetric optima, which the oracle module checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimation import FilterState, delayed_predictor
from .model import (
    DelayProfile,
    LinearSystemModel,
    ModelValidationError,
    PolicyDecision,
)
from .riccati import (
    GainSchedule,
    backward_recursion_delayed,
    backward_recursion_perfect,
)


@dataclass(frozen=True)
class ControllerRegime:
    """A complete controller: observation mode, match type, and gains.

    compensate_drift selects whether the controller's internal propagation
    feeds the model's known drift (affine-compensated mode) or ignores it
    (the default, matching the zero-mean derivations).
    """

    observation: str
    gains: GainSchedule
    delay: Optional[DelayProfile] = None
    compensate_drift: bool = False

    def __post_init__(self):
        if self.observation not in ("full", "partial"):
            raise ModelValidationError(
                [f"observation must be 'full' or 'partial', got {self.observation!r}"]
            )
        match = "delayed" if (self.delay is not None and self.delay.M >= 1) else "perfect"
        expected = f"{self.observation}-{match}"
        if self.gains.regime != expected:
            raise ModelValidationError(
                [f"gain schedule tagged {self.gains.regime}, regime requires {expected}"]
            )

    @property
    def regime_tag(self) -> str:
        return self.gains.regime


def _stage_in_range(gains: GainSchedule, k: int):
    if not (0 <= k <= gains.N - 1):
        raise ModelValidationError([f"stage {k} outside 0..{gains.N - 1}"])


def act_full_perfect(gains: GainSchedule, k: int, x_k: np.ndarray, tau_k: int) -> PolicyDecision:
    """u_k = -V_k x_k when the endpoint is ON, zero otherwise."""
    _stage_in_range(gains, k)
    x = np.atleast_1d(np.asarray(x_k, dtype=float))
    if tau_k == 1:
        return PolicyDecision(u=-(gains.V[k] @ x), applied=True)
    return PolicyDecision(u=np.zeros(gains.V[k].shape[0]), applied=False)


def act_partial_perfect(
    gains: GainSchedule, k: int, filter_state: FilterState, tau_k: int
) -> PolicyDecision:
    """u_k = -V_k x_hat_k when ON; the filter must sit at stage k."""
    _stage_in_range(gains, k)
    if filter_state.k != k:
        raise ModelValidationError(
            [f"filter at stage {filter_state.k}, decision requested at stage {k}"]
        )
    if tau_k == 1:
        return PolicyDecision(u=-(gains.V[k] @ filter_state.x_hat), applied=True)
    return PolicyDecision(u=np.zeros(gains.V[k].shape[0]), applied=False)


def act_full_delayed(
    gains: GainSchedule,
    k: int,
    lambda_k,
    tau_gate: int,
    model: LinearSystemModel,
) -> PolicyDecision:
    """Delayed-regime law: feedback through the M-step predictor on the grid.

    Off-grid stages (k not divisible by M) and stage 0 produce zero control.
    On-grid, the gain acts on the predictor output from lambda_k =
    (x_{k-M}, u_{k-M}), gated by the endpoint state at generation time
    k - M_B.

    The model argument supplies the dynamics the predictor propagates
    through; pass a drift-stripped model for the zero-mean variant.
    """
    _stage_in_range(gains, k)
    M = gains.delay.M
    s = gains.V[k].shape[0]
    if k == 0 or k % M != 0:
        return PolicyDecision(u=np.zeros(s), applied=False)
    if tau_gate != 1:
        return PolicyDecision(u=np.zeros(s), applied=False)
    if lambda_k is None:
        raise ModelValidationError(
            [f"on-grid stage {k} requires the transmitted pair (x_{{k-M}}, u_{{k-M}})"]
        )
    x_pred = delayed_predictor(lambda_k, model, k, M)
    return PolicyDecision(u=-(gains.V[k] @ x_pred), applied=True)


def act_partial_delayed(
    gains: GainSchedule, k: int, filter_state: FilterState, tau_gate: int
) -> PolicyDecision:
    """Delayed law on the controller-side filter mean.

    The filter must already be propagated to stage k (its mean is the
    conditional mean of x_k given the gated observation history).
    """
    _stage_in_range(gains, k)
    M = gains.delay.M
    s = gains.V[k].shape[0]
    if k == 0 or k % M != 0:
        return PolicyDecision(u=np.zeros(s), applied=False)
    if filter_state.k != k:
        raise ModelValidationError(
            [f"filter clock at stage {filter_state.k}, decision requested at stage {k}"]
        )
    if tau_gate != 1:
        return PolicyDecision(u=np.zeros(s), applied=False)
    return PolicyDecision(u=-(gains.V[k] @ filter_state.x_hat), applied=True)


def sandwich_policy(
    model: LinearSystemModel,
    p: float,
    q: float,
    delay: Optional[DelayProfile] = None,
    observation: str = "full",
) -> ControllerRegime:
    """Symmetric gains at p' = 1 - q, packaged to run on the (p, q) chain.

    Args:
        model: the plant.
        p: ON-persistence of the target asymmetric chain.
        q: OFF-persistence of the target asymmetric chain.
        delay: optional delay profile (delayed gains when M >= 1).
        observation: "full" or "partial".

    Raises:
        ModelValidationError: "sandwich hypotheses violated" unless p > 1 - q
            strictly (the symmetric case is excluded).
    """
    if p <= 1.0 - q:
        raise ModelValidationError(["sandwich hypotheses violated: requires p > 1 - q"])
    p_prime = 1.0 - q
    if delay is not None and delay.M >= 1:
        gains = backward_recursion_delayed(model, p_prime, delay)
        delay = gains.delay
    else:
        gains = backward_recursion_perfect(model, p_prime)
        delay = None
    if observation == "partial":
        gains = gains.with_regime(gains.regime.replace("full-", "partial-"))
    return ControllerRegime(observation=observation, gains=gains, delay=delay)
