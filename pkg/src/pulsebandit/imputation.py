"""Pretrained imputation of late-observed context coordinates.

An imputer models the conditional law of W_t given the observed history
S_{1:t}.  Expected arm features are

    phi_hat(t, a) = E_model[ Phi(Y_t, a) | S_{1:t} ],

approximated by a Monte-Carlo average over model draws, or evaluated
exactly at the conditional mean when the feature map is affine in W.

Two estimators can be fit from historical full-context trajectories:

* LinearAR: ordinary least squares of W_t on the stacked lags
  (S_t, ..., S_{t-m}) plus an intercept, pooled across trajectories over
  t in [m+1, T0].  The lag stack is zero-padded at prediction time when
  fewer than m+1 observations exist.  The stored coefficient stack has
  exactly (m+1) * d_S * d_W entries; the intercept is kept separately.
* Kernel: Nadaraya-Watson regression with the box kernel
  K(u) = 1{||u||_inf <= 1/2}; an empty window falls back to the global
  training mean and increments a fallback counter.

Both store a residual standard deviation and sample from a Gaussian with
that scale around the conditional mean.  The Oracle imputer wraps a live
environment and returns the environment's own conditional mean bit for
bit; it cannot be persisted.  The Null imputer imputes W = 0.  The
FullObserver kind marks agents that bypass imputation entirely and is
rejected by expected_features.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FitError,
    InputError,
    ParameterError,
    PersistenceError,
    UsageError,
)
from .features import phi

__all__ = [
    "ImputerKind",
    "HistoricalDataset",
    "Imputer",
    "ImputedFeatures",
    "fit_linear_ar",
    "fit_kernel",
    "null_imputer",
    "oracle_imputer",
    "full_observer",
    "expected_features",
    "expected_feature_matrix",
    "save_imputer",
    "load_imputer",
    "DEFAULT_MC_SAMPLES",
]

DEFAULT_MC_SAMPLES = 64


class ImputerKind:
    ORACLE = "oracle"
    LINEAR_AR = "linear_ar"
    KERNEL = "kernel"
    NULL = "null"
    FULL_OBSERVER = "full_observer"

    ALL = (ORACLE, LINEAR_AR, KERNEL, NULL, FULL_OBSERVER)


@dataclass
class HistoricalDataset:
    """N pretraining trajectories of T0 fully observed (S, W) pairs.

    s has shape (N, T0, d_S) and w has shape (N, T0, d_W).  Trajectories
    are mutually independent draws from the same joint law as the bandit
    phase contexts.
    """

    s: np.ndarray
    w: np.ndarray
    seed: int = 0
    env_id: str = ""

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.s.ndim != 3 or self.w.ndim != 3:
            raise InputError("s and w must be (N, T0, dim) arrays")
        if self.s.shape[:2] != self.w.shape[:2]:
            raise InputError(
                f"s and w disagree on (N, T0): {self.s.shape[:2]} vs {self.w.shape[:2]}"
            )
        if self.s.shape[0] < 1 or self.s.shape[1] < 1:
            raise InputError("dataset must contain at least one trajectory and step")
        if not (np.all(np.isfinite(self.s)) and np.all(np.isfinite(self.w))):
            raise InputError("historical data contains non-finite entries")

    @property
    def n_traj(self):
        return self.s.shape[0]

    @property
    def t0(self):
        return self.s.shape[1]

    @property
    def d_s(self):
        return self.s.shape[2]

    @property
    def d_w(self):
        return self.w.shape[2]

    def flatten(self):
        """(N*T0, d_S) and (N*T0, d_W) views of all pairs."""
        return (
            self.s.reshape(-1, self.d_s),
            self.w.reshape(-1, self.d_w),
        )


@dataclass
class Imputer:
    """A fitted (or wired) conditional model of W given observed history."""

    kind: str
    d_s: int
    d_w: int
    params: dict = field(default_factory=dict)
    mc_samples: int = DEFAULT_MC_SAMPLES
    analytic: bool = True
    # diagnostics: number of kernel queries that fell back to the global mean
    fallback_count: int = 0

    def __post_init__(self):
        if self.kind not in ImputerKind.ALL:
            raise ParameterError(f"unknown imputer kind {self.kind!r}")
        if self.mc_samples < 1:
            raise ParameterError("mc_samples must be positive")

    # -- conditional law ---------------------------------------------------

    def conditional_mean(self, observed_history):
        """Model conditional mean of W_t given the observed history.

        `observed_history` is a (t, d_S) array (or a single (d_S,) row);
        the last row is S_t.
        """
        hist = _as_history(observed_history, self.d_s)
        if self.kind == ImputerKind.NULL:
            return np.zeros(self.d_w)
        if self.kind == ImputerKind.ORACLE:
            return np.asarray(self.params["env"].oracle_mean_w(), dtype=float)
        if self.kind == ImputerKind.LINEAR_AR:
            stacked = _lag_stack(hist, self.params["lag"], self.d_s)
            return self.params["intercept"] + stacked @ self.params["coef"]
        if self.kind == ImputerKind.KERNEL:
            return self._kernel_predict(hist[-1])
        raise UsageError(f"imputer kind {self.kind!r} has no conditional mean")

    def conditional_sd(self):
        """Per-coordinate sampling scale of the model law."""
        if self.kind == ImputerKind.NULL:
            return np.zeros(self.d_w)
        if self.kind == ImputerKind.ORACLE:
            return np.full(self.d_w, float(self.params["env"].oracle_sd_w()))
        if self.kind in (ImputerKind.LINEAR_AR, ImputerKind.KERNEL):
            return np.asarray(self.params["noise_sd"], dtype=float)
        raise UsageError(f"imputer kind {self.kind!r} has no sampling scale")

    def sample(self, observed_history, rng, n):
        """n model draws of W_t; shape (n, d_W)."""
        if n < 1:
            raise ParameterError("sample count must be positive")
        mean = self.conditional_mean(observed_history)
        sd = self.conditional_sd()
        return mean[None, :] + rng.standard_normal((n, self.d_w)) * sd[None, :]

    # -- internals ---------------------------------------------------------

    def _kernel_predict(self, s_t):
        train_s = self.params["train_s"]
        train_w = self.params["train_w"]
        h = self.params["bandwidth"]
        inside = (np.abs(train_s - s_t[None, :]) <= 0.5 * h).all(axis=1)
        count = int(inside.sum())
        if count == 0:
            self.fallback_count += 1
            return self.params["global_mean"].copy()
        return train_w[inside].mean(axis=0)


def _as_history(observed_history, d_s):
    hist = np.asarray(observed_history, dtype=float)
    if hist.ndim == 1:
        hist = hist[None, :]
    if hist.ndim != 2 or hist.shape[1] != d_s or hist.shape[0] < 1:
        raise InputError(
            f"observed history must have shape (t, {d_s}) with t >= 1, got {hist.shape}"
        )
    if not np.all(np.isfinite(hist)):
        raise InputError("observed history contains non-finite entries")
    return hist


def _lag_stack(hist, lag, d_s):
    """Row (S_t, S_{t-1}, ..., S_{t-lag}) with zero padding before t = 1."""
    t = hist.shape[0]
    out = np.zeros((lag + 1) * d_s)
    for j in range(lag + 1):
        if t - 1 - j >= 0:
            out[j * d_s : (j + 1) * d_s] = hist[t - 1 - j]
    return out


# -- fitting ----------------------------------------------------------------


def fit_linear_ar(data, lag, ridge_eps=1e-10, mc_samples=DEFAULT_MC_SAMPLES):
    """Pooled OLS of W_t on (1, S_t, ..., S_{t-lag}) over t in [lag+1, T0].

    A tiny ridge `ridge_eps * I` is added to the normal equations; with
    ridge_eps = 0 a rank-deficient design raises FitError naming the rank.
    The residual standard deviation per W coordinate is stored as the
    sampling scale.
    """
    if lag < 0:
        raise ParameterError(f"lag must be nonnegative, got {lag}")
    if ridge_eps < 0:
        raise ParameterError(f"ridge_eps must be nonnegative, got {ridge_eps}")
    if data.t0 <= lag:
        raise InputError(
            f"T0 = {data.t0} is too short for lag {lag}; need T0 >= lag + 1"
        )

    n, t0, d_s = data.n_traj, data.t0, data.d_s
    rows_per_traj = t0 - lag
    p = (lag + 1) * d_s
    design = np.empty((n * rows_per_traj, p + 1))
    target = np.empty((n * rows_per_traj, data.d_w))
    design[:, 0] = 1.0
    r = 0
    for i in range(n):
        for t in range(lag, t0):
            for j in range(lag + 1):
                design[r, 1 + j * d_s : 1 + (j + 1) * d_s] = data.s[i, t - j]
            target[r] = data.w[i, t]
            r += 1

    gram = design.T @ design
    if ridge_eps == 0.0:
        rank = np.linalg.matrix_rank(gram)
        if rank < p + 1:
            raise FitError(
                f"design is rank deficient (rank {rank} < {p + 1}) and ridge_eps is 0"
            )
    coef_full = np.linalg.solve(
        gram + ridge_eps * np.eye(p + 1), design.T @ target
    )
    resid = target - design @ coef_full
    dof = max(design.shape[0] - (p + 1), 1)
    noise_sd = np.sqrt((resid * resid).sum(axis=0) / dof)

    return Imputer(
        kind=ImputerKind.LINEAR_AR,
        d_s=d_s,
        d_w=data.d_w,
        params={
            "lag": int(lag),
            "intercept": coef_full[0].copy(),
            "coef": coef_full[1:].copy(),
            "noise_sd": noise_sd,
            "ridge_eps": float(ridge_eps),
        },
        mc_samples=mc_samples,
    )


def fit_kernel(data, bandwidth=None, beta=1.0, mc_samples=DEFAULT_MC_SAMPLES):
    """Nadaraya-Watson estimator over the flattened (S, W) pairs.

    The default bandwidth follows the smoothness-rate recipe
    h = n^{-1/(2 beta + d_S)} for n training pairs.  The box kernel gives
    piecewise-constant predictions; queries with no training point within
    the window fall back to the global mean (counted in fallback_count).
    """
    if beta <= 0 or beta > 1:
        raise ParameterError(f"beta must lie in (0, 1], got {beta}")
    s_flat, w_flat = data.flatten()
    n = s_flat.shape[0]
    if bandwidth is None:
        bandwidth = float(n ** (-1.0 / (2.0 * beta + data.d_s)))
    bandwidth = float(bandwidth)
    if not math.isfinite(bandwidth) or bandwidth <= 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth!r}")

    global_mean = w_flat.mean(axis=0)
    # in-sample residual scale on a capped, evenly spaced subset; each
    # window contains its own point, so the estimate is slightly optimistic
    # but stable
    m = min(n, 1000)
    idx = np.linspace(0, n - 1, m).astype(int)
    fits = np.empty((m, data.d_w))
    for lo in range(0, m, 200):
        hi = min(lo + 200, m)
        inside = (
            np.abs(s_flat[idx[lo:hi], None, :] - s_flat[None, :, :])
            <= 0.5 * bandwidth
        ).all(axis=2)
        counts = np.maximum(inside.sum(axis=1), 1)
        fits[lo:hi] = (inside @ w_flat) / counts[:, None]
    resid = w_flat[idx] - fits
    noise_sd = np.sqrt((resid * resid).mean(axis=0))

    return Imputer(
        kind=ImputerKind.KERNEL,
        d_s=data.d_s,
        d_w=data.d_w,
        params={
            "bandwidth": bandwidth,
            "beta": float(beta),
            "train_s": s_flat.copy(),
            "train_w": w_flat.copy(),
            "global_mean": global_mean,
            "noise_sd": noise_sd,
        },
        mc_samples=mc_samples,
    )


def null_imputer(d_s, d_w, mc_samples=DEFAULT_MC_SAMPLES):
    """Imputes W = 0 deterministically."""
    return Imputer(kind=ImputerKind.NULL, d_s=d_s, d_w=d_w, mc_samples=mc_samples)


def oracle_imputer(env, mc_samples=DEFAULT_MC_SAMPLES):
    """Wraps a live environment; returns the true conditional mean of W_t
    for the environment's current step, bit for bit."""
    return Imputer(
        kind=ImputerKind.ORACLE,
        d_s=env.d_s,
        d_w=env.d_w,
        params={"env": env},
        mc_samples=mc_samples,
    )


def full_observer(d_s, d_w):
    """Marker for agents that observe W directly and never impute."""
    return Imputer(kind=ImputerKind.FULL_OBSERVER, d_s=d_s, d_w=d_w)


# -- expected features -------------------------------------------------------


@dataclass(frozen=True)
class ImputedFeatures:
    """Expected feature vector with Monte-Carlo metadata.

    n_samples is 0 when the value was computed analytically (feature map
    affine in W and the imputer flagged analytic); mc_se is the
    per-coordinate standard error of the Monte-Carlo mean, or None.
    """

    phi_hat: np.ndarray
    n_samples: int
    mc_se: np.ndarray = None


def expected_features(imputer, feature_map, observed_history, arm, rng=None):
    """phi_hat(t, a): expected features of arm `arm` under the imputer."""
    if imputer.kind == ImputerKind.FULL_OBSERVER:
        raise UsageError(
            "full-observer agents bypass imputation; expected_features is undefined"
        )
    if imputer.d_s != feature_map.d_s or imputer.d_w != feature_map.d_w:
        raise InputError(
            f"imputer layout ({imputer.d_s}, {imputer.d_w}) does not match "
            f"feature map layout ({feature_map.d_s}, {feature_map.d_w})"
        )
    hist = _as_history(observed_history, imputer.d_s)
    s_t = hist[-1]

    if imputer.analytic and feature_map.affine_in_w:
        mu = imputer.conditional_mean(hist)
        y = feature_map.assemble_context(s_t, mu)
        return ImputedFeatures(phi(feature_map, y, s_t, arm), n_samples=0)

    if rng is None:
        raise InputError("Monte-Carlo expected features require an rng")
    draws = imputer.sample(hist, rng, imputer.mc_samples)
    feats = np.stack(
        [
            phi(feature_map, feature_map.assemble_context(s_t, w_draw), s_t, arm)
            for w_draw in draws
        ]
    )
    n = feats.shape[0]
    se = feats.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(feats.shape[1])
    return ImputedFeatures(feats.mean(axis=0), n_samples=n, mc_se=se)


def expected_feature_matrix(imputer, feature_map, observed_history, rng=None):
    """Stack of expected features over all arms; row a is arm a."""
    rows = [
        expected_features(imputer, feature_map, observed_history, a, rng=rng).phi_hat
        for a in range(feature_map.arm_count)
    ]
    return np.stack(rows)


# -- persistence --------------------------------------------------------------

FORMAT_VERSION = 1


def _flat(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel(order="C")]


def save_imputer(imputer, path):
    """Write a fitted imputer as a structured text document.

    Arrays are stored as flat row-major decimal lists; floats round-trip
    bit-exactly through the shortest-repr encoding.  Oracle and
    full-observer imputers hold live handles and cannot be persisted.
    """
    if imputer.kind in (ImputerKind.ORACLE, ImputerKind.FULL_OBSERVER):
        raise UsageError(f"imputer kind {imputer.kind!r} is not persistable")
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": imputer.kind,
        "d_s": imputer.d_s,
        "d_w": imputer.d_w,
        "mc_samples": imputer.mc_samples,
        "analytic": imputer.analytic,
        "params": {},
    }
    p = imputer.params
    if imputer.kind == ImputerKind.LINEAR_AR:
        doc["params"] = {
            "lag": p["lag"],
            "intercept": _flat(p["intercept"]),
            "coef": _flat(p["coef"]),
            "noise_sd": _flat(p["noise_sd"]),
            "ridge_eps": p["ridge_eps"],
        }
    elif imputer.kind == ImputerKind.KERNEL:
        doc["params"] = {
            "bandwidth": p["bandwidth"],
            "beta": p["beta"],
            "n_train": int(p["train_s"].shape[0]),
            "train_s": _flat(p["train_s"]),
            "train_w": _flat(p["train_w"]),
            "global_mean": _flat(p["global_mean"]),
            "noise_sd": _flat(p["noise_sd"]),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _require(doc, key, where):
    if key not in doc:
        raise PersistenceError("missing required entry", field=f"{where}{key}")
    return doc[key]


def _array(values, shape, name):
    try:
        arr = np.asarray([float(v) for v in values], dtype=float)
    except (TypeError, ValueError) as exc:
        raise PersistenceError(f"not a flat numeric list ({exc})", field=name)
    if arr.size != int(np.prod(shape)):
        raise PersistenceError(
            f"expected {int(np.prod(shape))} entries, got {arr.size}", field=name
        )
    return arr.reshape(shape, order="C")


def load_imputer(path):
    """Inverse of save_imputer; bit-exact round trip for all parameters."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"cannot parse imputer file: {exc}")
    version = _require(doc, "format_version", "")
    if version != FORMAT_VERSION:
        raise PersistenceError(
            f"unsupported value {version!r} (expected {FORMAT_VERSION})",
            field="format_version",
        )
    kind = _require(doc, "kind", "")
    if kind not in (ImputerKind.LINEAR_AR, ImputerKind.KERNEL, ImputerKind.NULL):
        raise PersistenceError(f"unsupported value {kind!r}", field="kind")
    d_s = int(_require(doc, "d_s", ""))
    d_w = int(_require(doc, "d_w", ""))
    mc_samples = int(doc.get("mc_samples", DEFAULT_MC_SAMPLES))
    analytic = bool(doc.get("analytic", True))
    raw = _require(doc, "params", "")

    if kind == ImputerKind.NULL:
        return null_imputer(d_s, d_w, mc_samples=mc_samples)

    if kind == ImputerKind.LINEAR_AR:
        lag = int(_require(raw, "lag", "params."))
        params = {
            "lag": lag,
            "intercept": _array(
                _require(raw, "intercept", "params."), (d_w,), "params.intercept"
            ),
            "coef": _array(
                _require(raw, "coef", "params."),
                ((lag + 1) * d_s, d_w),
                "params.coef",
            ),
            "noise_sd": _array(
                _require(raw, "noise_sd", "params."), (d_w,), "params.noise_sd"
            ),
            "ridge_eps": float(_require(raw, "ridge_eps", "params.")),
        }
    else:
        n_train = int(_require(raw, "n_train", "params."))
        params = {
            "bandwidth": float(_require(raw, "bandwidth", "params.")),
            "beta": float(_require(raw, "beta", "params.")),
            "train_s": _array(
                _require(raw, "train_s", "params."), (n_train, d_s), "params.train_s"
            ),
            "train_w": _array(
                _require(raw, "train_w", "params."), (n_train, d_w), "params.train_w"
            ),
            "global_mean": _array(
                _require(raw, "global_mean", "params."), (d_w,), "params.global_mean"
            ),
            "noise_sd": _array(
                _require(raw, "noise_sd", "params."), (d_w,), "params.noise_sd"
            ),
        }
    return Imputer(
        kind=kind,
        d_s=d_s,
        d_w=d_w,
        params=params,
        mc_samples=mc_samples,
        analytic=analytic,
    )
