"""Incremental ridge-regression state with exact determinant tracking.

Maintains the regularized Gram matrix

    Sigma_t = lambda * I + sum_{tau<=t} x_tau x_tau^T

through rank-one Cholesky updates, together with the running least-squares
solution of Sigma_t theta = sum_tau r_tau x_tau and the log-determinant of
Sigma_t.  The log-determinant is advanced with Sylvester's identity

    det(Sigma + x x^T) = det(Sigma) * (1 + x^T Sigma^{-1} x),

so each update costs one triangular solve instead of a refactorization.
A full Cholesky refactorization is forced every `REFACTOR_INTERVAL`
updates, and whenever a diagonal pivot of the factor degrades, to bound
floating-point drift.  Matrices are dense; dimensions here are tiny.
"""

import math

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InputError, NumericalError, ParameterError

__all__ = [
    "RidgeState",
    "new_ridge_state",
    "rank_one_update",
    "quadratic_form_inv",
    "potential_bound_check",
    "REFACTOR_INTERVAL",
]

# Forced refactorization cadence and relative pivot floor.  The floor is
# compared against squared factor diagonals, i.e. against matrix pivots.
REFACTOR_INTERVAL = 512
PIVOT_FLOOR = 1e-12


class RidgeState:
    """Mutable ridge state owned by exactly one agent.

    Attributes
    ----------
    dim : int
    lam : float
        Ridge weight lambda > 0.
    gram : (dim, dim) ndarray
        Sigma = lam * I + sum of outer products, kept exactly.
    factor : (dim, dim) ndarray
        Lower Cholesky factor of `gram`, maintained incrementally.
    xr_sum : (dim,) ndarray
        sum of reward-weighted feature vectors.
    theta_hat : (dim,) ndarray
        Solution of gram @ theta = xr_sum (two triangular solves).
    log_det : float
        log det(gram), advanced via the Sylvester identity.
    update_count : int
    """

    __slots__ = (
        "dim",
        "lam",
        "gram",
        "factor",
        "xr_sum",
        "theta_hat",
        "log_det",
        "update_count",
        "_since_refactor",
    )

    def __init__(self, dim, lam):
        self.dim = dim
        self.lam = lam
        self.gram = np.eye(dim) * lam
        self.factor = np.eye(dim) * math.sqrt(lam)
        self.xr_sum = np.zeros(dim)
        self.theta_hat = np.zeros(dim)
        self.log_det = dim * math.log(lam)
        self.update_count = 0
        self._since_refactor = 0

    def clone(self):
        other = RidgeState.__new__(RidgeState)
        other.dim = self.dim
        other.lam = self.lam
        other.gram = self.gram.copy()
        other.factor = self.factor.copy()
        other.xr_sum = self.xr_sum.copy()
        other.theta_hat = self.theta_hat.copy()
        other.log_det = self.log_det
        other.update_count = self.update_count
        other._since_refactor = self._since_refactor
        return other


def new_ridge_state(dim, lam):
    """Fresh state with gram = lam * I."""
    if not isinstance(dim, (int, np.integer)) or isinstance(dim, bool) or dim < 1:
        raise ParameterError(f"dim must be a positive integer, got {dim!r}")
    lam = float(lam)
    if not math.isfinite(lam) or lam <= 0.0:
        raise ParameterError(f"lambda must be finite and positive, got {lam!r}")
    return RidgeState(int(dim), lam)


def _check_vector(state, v, name):
    v = np.asarray(v, dtype=float)
    if v.shape != (state.dim,):
        raise InputError(f"{name} must have shape ({state.dim},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} contains non-finite entries")
    return v


def quadratic_form_inv(state, v):
    """v^T Sigma^{-1} v via one triangular solve against the factor.

    Returns exactly 0.0 iff v is the zero vector.
    """
    v = _check_vector(state, v, "v")
    if not np.any(v):
        return 0.0
    z = solve_triangular(state.factor, v, lower=True, check_finite=False)
    return float(z @ z)


def _refactor(state):
    try:
        state.factor = np.linalg.cholesky(state.gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "gram matrix lost positive definiteness; state is inconsistent"
        ) from exc
    state._since_refactor = 0


def _chol_update(L, x):
    """In-place rank-one update: L L^T + x x^T -> L' L'^T, L lower."""
    d = L.shape[0]
    v = x.copy()
    for k in range(d):
        lkk = L[k, k]
        r = math.hypot(lkk, v[k])
        if r <= 0.0 or not math.isfinite(r):
            raise NumericalError("cholesky rank-one update hit a nonpositive pivot")
        c = r / lkk
        s = v[k] / lkk
        L[k, k] = r
        if k + 1 < d:
            L[k + 1 :, k] = (L[k + 1 :, k] + s * v[k + 1 :]) / c
            v[k + 1 :] = c * v[k + 1 :] - s * L[k + 1 :, k]


def _resolve_theta(state):
    if not np.any(state.xr_sum):
        state.theta_hat = np.zeros(state.dim)
        return
    z = solve_triangular(state.factor, state.xr_sum, lower=True, check_finite=False)
    state.theta_hat = solve_triangular(
        state.factor.T, z, lower=False, check_finite=False
    )


def rank_one_update(state, x, reward):
    """Fold one observation (x, reward) into the state, in place.

    Advances log_det by log(1 + x^T Sigma^{-1} x) before touching the
    factor, so the Sylvester increment is exact with respect to the
    pre-update state.  Returns the same (mutated) state.
    """
    x = _check_vector(state, x, "x")
    reward = float(reward)
    if not math.isfinite(reward):
        raise InputError(f"reward must be finite, got {reward!r}")

    quad = quadratic_form_inv(state, x)
    state.log_det += math.log1p(quad)
    state.gram += np.outer(x, x)
    state.xr_sum += reward * x
    state._since_refactor += 1

    if state._since_refactor >= REFACTOR_INTERVAL:
        _refactor(state)
    else:
        try:
            _chol_update(state.factor, x)
        except NumericalError:
            _refactor(state)
        diag = np.diagonal(state.factor)
        if np.any(diag * diag < PIVOT_FLOOR * state.lam):
            _refactor(state)

    state.update_count += 1
    _resolve_theta(state)
    return state


def potential_bound_check(state, horizon, feat_norm_bound):
    """(ok, slack) for log det(Sigma_t) - d log(lam) <= d log(1 + T B^2 / (d lam)).

    The right side is the elliptical-potential ceiling for any sequence of
    at most `horizon` feature vectors with Euclidean norm at most
    `feat_norm_bound`; slack is ceiling minus realized growth (zero when a
    sequence saturates the bound exactly).
    """
    horizon = int(horizon)
    bound_b = float(feat_norm_bound)
    if horizon < 0:
        raise ParameterError(f"horizon must be nonnegative, got {horizon}")
    if not math.isfinite(bound_b) or bound_b < 0.0:
        raise ParameterError(f"feat_norm_bound must be finite and >= 0, got {bound_b!r}")
    lhs = state.log_det - state.dim * math.log(state.lam)
    rhs = state.dim * math.log1p(horizon * bound_b * bound_b / (state.dim * state.lam))
    # sequences that saturate the ceiling exactly sit within accumulation
    # roundoff of it; 1e-9 absorbs that without masking design violations
    return lhs <= rhs + 1e-9, rhs - lhs
