"""UCB agents over imputed, observed, or full features.

The confidence radius after t observations is

    gamma_t = gamma_t^(0) + 3 d^2 sum_{tau <= t} D_tau,
    gamma_t^(0) = 3 lam
        + 6 (sigma_eta + sigma_eps)^2 [ log(4 t^2 / delta)
                                        + d log(1 + t B^2 / (d lam)) ],

evaluated in log space (the log of the product is expanded into a sum, so
the (1 + t B^2/(d lam))^d factor never overflows).  sigma_eps bounds the
sub-Gaussian scale of the imputation error and defaults to 2, the
worst-case value for feature maps bounded by 1; it can be overridden when
a sharper bound is known.  The radius of the initial ball, before any
observation, is gamma_1^(0).

A multiplicative `scale` (default 1.0) shrinks the radius uniformly for
practical runs; it is recorded in experiment metadata whenever not 1.

Arm selection maximizes max_{theta in BALL} theta . phi_a.  The ball
maximum has the closed form theta_hat . phi + sqrt(gamma) ||phi||_{Sigma^-1},
attained at theta* = theta_hat + sqrt(gamma) Sigma^{-1} phi / ||phi||_{Sigma^-1};
both selection forms are implemented and must agree, the ball form also
cross-checks that its optimizer lies in the ball.  Ties go to the lowest
arm index.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, InputError, ParameterError, UsageError
from .linalg import new_ridge_state, quadratic_form_inv, rank_one_update

__all__ = [
    "DtSource",
    "GammaSchedule",
    "gamma_zero",
    "gamma_at",
    "AgentKind",
    "SelectionForm",
    "AgentState",
    "make_agent",
    "current_gamma",
    "arm_ucb_scores",
    "select_arm",
    "observe",
    "theta_in_ball",
    "DEFAULT_SIGMA_EPS",
]

DEFAULT_SIGMA_EPS = 2.0


class DtSource(Enum):
    ORACLE = "oracle"
    PLUG_IN = "plug_in"
    CONSTANT = "constant"
    ZERO = "zero"


@dataclass
class GammaSchedule:
    """Confidence-radius schedule state.

    dt_cumsum accumulates the per-step divergences D_tau according to
    dt_source: ORACLE and PLUG_IN add the value supplied at observe time,
    CONSTANT adds `constant_dt` each step, ZERO keeps the sum at 0
    regardless of what is supplied.
    """

    lam: float
    sigma_eta: float
    delta: float
    feat_norm_bound: float
    dim: int
    dt_source: DtSource = DtSource.ZERO
    constant_dt: float = 0.0
    sigma_eps: float = DEFAULT_SIGMA_EPS
    scale: float = 1.0
    dt_cumsum: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ConfigError("schedule.lambda", f"must be positive, got {self.lam!r}")
        if not (math.isfinite(self.delta) and 0.0 < self.delta <= 1.0):
            raise ConfigError("schedule.delta", f"must lie in (0, 1], got {self.delta!r}")
        if not (math.isfinite(self.sigma_eta) and self.sigma_eta >= 0):
            raise ConfigError(
                "schedule.sigma_eta", f"must be nonnegative, got {self.sigma_eta!r}"
            )
        if not (math.isfinite(self.feat_norm_bound) and self.feat_norm_bound >= 0):
            raise ConfigError(
                "schedule.feat_norm_bound",
                f"must be nonnegative, got {self.feat_norm_bound!r}",
            )
        if self.dim < 1:
            raise ConfigError("schedule.dim", f"must be positive, got {self.dim}")
        if not (math.isfinite(self.sigma_eps) and self.sigma_eps >= 0):
            raise ConfigError(
                "schedule.sigma_eps", f"must be nonnegative, got {self.sigma_eps!r}"
            )
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ConfigError("schedule.gamma_scale", f"must be positive, got {self.scale!r}")
        if self.constant_dt < 0:
            raise ConfigError(
                "schedule.constant_dt", f"must be nonnegative, got {self.constant_dt!r}"
            )


def gamma_zero(schedule, t):
    """Divergence-free radius gamma_t^(0), before the scale factor."""
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    s = schedule
    log_term = (
        math.log(4.0)
        + 2.0 * math.log(t)
        - math.log(s.delta)
        + s.dim
        * math.log1p(t * s.feat_norm_bound * s.feat_norm_bound / (s.dim * s.lam))
    )
    width = s.sigma_eta + s.sigma_eps
    return 3.0 * s.lam + 6.0 * width * width * log_term


def gamma_at(schedule, t):
    """Scaled radius gamma_t; dt_cumsum must be current through step t."""
    return schedule.scale * (
        gamma_zero(schedule, t) + 3.0 * schedule.dim**2 * schedule.dt_cumsum
    )


class AgentKind(Enum):
    PULSE_UCB = "pulse_ucb"
    OFUL_OBSERVED = "oful_observed"
    OFUL_FULL = "oful_full"
    ORACLE_BEST = "oracle_best"
    UNIFORM_RANDOM = "uniform_random"


class SelectionForm(Enum):
    CLOSED_FORM = "closed_form"
    BALL_MAXIMIZATION = "ball_maximization"


_UCB_KINDS = (AgentKind.PULSE_UCB, AgentKind.OFUL_OBSERVED, AgentKind.OFUL_FULL)

# relative slack for the ball-membership cross-check of the explicit
# optimizer; covers triangular-solve round-off only
_BALL_CHECK_RTOL = 1e-9


@dataclass
class AgentState:
    name: str
    kind: AgentKind
    arm_count: int
    ridge: object = None
    schedule: GammaSchedule = None
    imputer: object = None
    selection_form: SelectionForm = SelectionForm.CLOSED_FORM
    # diagnostics
    last_gamma: float = field(default=None, repr=False)

    @property
    def is_ucb(self):
        return self.kind in _UCB_KINDS


def make_agent(
    name,
    kind,
    arm_count,
    dim=None,
    schedule=None,
    imputer=None,
    selection_form=SelectionForm.CLOSED_FORM,
):
    """Assemble an agent; UCB kinds require dim and schedule."""
    kind = AgentKind(kind)
    selection_form = SelectionForm(selection_form)
    if arm_count < 1:
        raise ParameterError("arm_count must be positive")
    if kind in _UCB_KINDS:
        if dim is None or schedule is None:
            raise ParameterError(f"{kind.value} agents need dim and schedule")
        if schedule.dim != dim:
            raise ParameterError(
                f"schedule.dim = {schedule.dim} does not match feature dim {dim}"
            )
        ridge = new_ridge_state(dim, schedule.lam)
    else:
        ridge = None
    if kind is AgentKind.PULSE_UCB and imputer is None:
        raise ParameterError("pulse_ucb agents need an imputer")
    return AgentState(
        name=name,
        kind=kind,
        arm_count=int(arm_count),
        ridge=ridge,
        schedule=schedule,
        imputer=imputer,
        selection_form=selection_form,
    )


def current_gamma(agent):
    """Radius of the ball used for the next selection.

    Before any observation this is gamma_1^(0); after t observations it is
    gamma_t with dt_cumsum through step t.
    """
    if not agent.is_ucb:
        raise UsageError(f"{agent.kind.value} agents have no confidence schedule")
    t = agent.ridge.update_count
    if t == 0:
        return agent.schedule.scale * gamma_zero(agent.schedule, 1)
    return gamma_at(agent.schedule, t)


def _sigma_inv(agent, v):
    z = solve_triangular(agent.ridge.factor, v, lower=True, check_finite=False)
    return solve_triangular(agent.ridge.factor.T, z, lower=False, check_finite=False)


def arm_ucb_scores(agent, arm_features):
    """Optimistic score of every candidate arm under the agent's form.

    Closed form evaluates theta_hat . x + sqrt(gamma x^T Sigma^{-1} x)
    directly; ball maximization materializes the maximizing theta on the
    confidence ball and scores through it, cross-checking membership.
    Both forms agree up to floating point.
    """
    if not agent.is_ucb:
        raise UsageError(f"{agent.kind.value} agents have no UCB scores")
    feats = np.asarray(arm_features, dtype=float)
    if feats.ndim != 2 or feats.shape[1] != agent.ridge.dim:
        raise InputError(
            f"arm features must have shape (n_arms, {agent.ridge.dim}), got {feats.shape}"
        )
    if not np.all(np.isfinite(feats)):
        raise InputError("arm features contain non-finite entries")

    gamma = current_gamma(agent)
    agent.last_gamma = gamma
    root_gamma = math.sqrt(gamma)
    theta = agent.ridge.theta_hat

    scores = np.empty(feats.shape[0])
    for a in range(feats.shape[0]):
        x = feats[a]
        quad = quadratic_form_inv(agent.ridge, x)
        if agent.selection_form is SelectionForm.CLOSED_FORM:
            scores[a] = float(theta @ x) + root_gamma * math.sqrt(quad)
        else:
            if quad == 0.0:
                scores[a] = float(theta @ x)
                continue
            # explicit maximizer over the ball, then cross-check membership
            direction = _sigma_inv(agent, x) / math.sqrt(quad)
            theta_star = theta + root_gamma * direction
            diff = theta_star - theta
            radius = float(diff @ (agent.ridge.gram @ diff))
            if radius > gamma * (1.0 + _BALL_CHECK_RTOL):
                raise InputError(
                    "ball-maximization optimizer left the confidence ball "
                    f"({radius} > {gamma})"
                )
            scores[a] = float(theta_star @ x)
    return scores


def select_arm(agent, arm_features, optimal_arm=None, rng=None):
    """Index of the chosen arm.

    UCB agents maximize the optimistic score over the current ball;
    oracle-best agents require the environment's optimal arm injected;
    uniform-random agents require their own rng.  Exact score ties resolve
    to the lowest index.
    """
    if agent.kind is AgentKind.ORACLE_BEST:
        if optimal_arm is None:
            raise UsageError("oracle_best requires the optimal arm to be injected")
        return int(optimal_arm)
    if agent.kind is AgentKind.UNIFORM_RANDOM:
        if rng is None:
            raise UsageError("uniform_random requires an rng")
        return int(rng.integers(0, agent.arm_count))
    scores = arm_ucb_scores(agent, arm_features)
    return int(np.argmax(scores))  # first maximum: lowest index


def observe(agent, chosen_features, reward, dt_value=None):
    """Fold the observed (features, reward) pair into the agent.

    dt_value feeds the divergence accumulator for ORACLE and PLUG_IN
    schedules; CONSTANT adds its configured value and ZERO ignores
    everything.
    """
    if not agent.is_ucb:
        raise UsageError(f"{agent.kind.value} agents do not update")
    rank_one_update(agent.ridge, chosen_features, reward)
    sched = agent.schedule
    if sched.dt_source is DtSource.ZERO:
        return agent
    if sched.dt_source is DtSource.CONSTANT:
        sched.dt_cumsum += sched.constant_dt
        return agent
    if dt_value is None:
        raise InputError(
            f"dt_source {sched.dt_source.value} requires a dt_value at observe time"
        )
    dt_value = float(dt_value)
    if not math.isfinite(dt_value) or dt_value < 0:
        raise InputError(f"dt_value must be finite and nonnegative, got {dt_value!r}")
    sched.dt_cumsum += dt_value
    return agent


def theta_in_ball(agent, theta_true):
    """True iff (theta_hat - theta)^T Sigma_t (theta_hat - theta) <= gamma_t."""
    if not agent.is_ucb:
        raise UsageError(f"{agent.kind.value} agents have no confidence ball")
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_true.shape != (agent.ridge.dim,):
        raise InputError(
            f"theta must have shape ({agent.ridge.dim},), got {theta_true.shape}"
        )
    diff = agent.ridge.theta_hat - theta_true
    val = float(diff @ (agent.ridge.gram @ diff))
    return val <= current_gamma(agent)
