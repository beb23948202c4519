"""Arm-feature maps Phi(Y_t, a).

A FeatureMap turns a full context vector Y (observed part S plus the
late-observed part W) and an arm index into a feature vector.  Maps are
pure and deterministic; all state lives in the frozen map object.  Arm
indices follow one convention everywhere: for two-armed maps, index 0 is
the arm a = -1 and index 1 is the arm a = +1.

Custom maps are registered under a name at setup time; configs refer to
them by name only, never by code.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InputError, ParameterError

__all__ = [
    "MapKind",
    "FeatureMap",
    "synthetic_interaction_map",
    "lower_bound_two_arm_map",
    "identity_map",
    "register_custom_map",
    "custom_map",
    "phi",
    "arm_feature_matrix",
    "calibrate_feat_norm_bound",
]


class MapKind(Enum):
    SYNTHETIC_INTERACTION = "synthetic_interaction"
    LOWER_BOUND_TWO_ARM = "lower_bound_two_arm"
    IDENTITY = "identity"
    CUSTOM = "custom"


@dataclass(frozen=True)
class FeatureMap:
    """Immutable description of an arm-feature map.

    d_s and d_w give the layout of the full context: Y = (S, W) with S the
    observed prefix and W the late-observed suffix.  `affine_in_w` records
    whether every coordinate of Phi is affine in W for each fixed (S, a);
    when true, expected features under an imputer reduce to evaluating Phi
    at the imputed conditional mean.  `feat_norm_bound` is the norm bound B
    used by confidence schedules; None until calibrated or set.
    """

    kind: MapKind
    output_dim: int
    arm_count: int
    d_s: int
    d_w: int
    affine_in_w: bool
    feat_norm_bound: float = None
    params: dict = field(default_factory=dict)

    def assemble_context(self, observed, w):
        """Full context vector Y from the observed part and a W value."""
        s = np.atleast_1d(np.asarray(observed, dtype=float))
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if s.shape != (self.d_s,):
            raise InputError(f"observed part must have shape ({self.d_s},), got {s.shape}")
        if w.shape != (self.d_w,):
            raise InputError(f"late part must have shape ({self.d_w},), got {w.shape}")
        return np.concatenate([s, w])

    def with_feat_norm_bound(self, bound):
        bound = float(bound)
        if not np.isfinite(bound) or bound <= 0:
            raise ParameterError(f"feat_norm_bound must be positive, got {bound!r}")
        return FeatureMap(
            self.kind,
            self.output_dim,
            self.arm_count,
            self.d_s,
            self.d_w,
            self.affine_in_w,
            bound,
            self.params,
        )


def synthetic_interaction_map():
    """Phi(Y, a) = (1, S, W, S*a) for scalar S, W and arms a in {-1, +1}."""
    return FeatureMap(
        kind=MapKind.SYNTHETIC_INTERACTION,
        output_dim=4,
        arm_count=2,
        d_s=1,
        d_w=1,
        affine_in_w=True,
    )


def lower_bound_two_arm_map(d_lin, d_non):
    """Two-armed map over Y = (Q, O, W).

    The first arm (index 0) keeps Y itself; the second arm (index 1) maps
    to (-Q, 0, 0): the linear block is negated and the nonparametric block
    and W coordinate are zeroed.
    """
    if d_lin < 1 or d_non < 1:
        raise ParameterError("d_lin and d_non must be positive")
    return FeatureMap(
        kind=MapKind.LOWER_BOUND_TWO_ARM,
        output_dim=d_lin + d_non + 1,
        arm_count=2,
        d_s=d_lin + d_non,
        d_w=1,
        affine_in_w=True,
        params={"d_lin": int(d_lin), "d_non": int(d_non)},
    )


def identity_map(dim, arm_count, d_w=0):
    """Phi(Y, a) = Y for every arm.  Used by replay where each candidate
    row carries its own feature vector."""
    if dim < 1 or arm_count < 1:
        raise ParameterError("dim and arm_count must be positive")
    if not 0 <= d_w <= dim:
        raise ParameterError("d_w must lie in [0, dim]")
    return FeatureMap(
        kind=MapKind.IDENTITY,
        output_dim=dim,
        arm_count=arm_count,
        d_s=dim - d_w,
        d_w=d_w,
        affine_in_w=True,
    )


_CUSTOM_REGISTRY = {}


def register_custom_map(name, fn, output_dim, arm_count, d_s, d_w, affine_in_w):
    """Register a named pure function fn(full_context, observed, arm) -> vec.

    Registration happens at harness setup; there is no dynamic code loading
    from configs.
    """
    if not isinstance(name, str) or not name:
        raise ParameterError("custom map name must be a nonempty string")
    _CUSTOM_REGISTRY[name] = FeatureMap(
        kind=MapKind.CUSTOM,
        output_dim=int(output_dim),
        arm_count=int(arm_count),
        d_s=int(d_s),
        d_w=int(d_w),
        affine_in_w=bool(affine_in_w),
        params={"name": name, "fn": fn},
    )
    return _CUSTOM_REGISTRY[name]


def custom_map(name):
    if name not in _CUSTOM_REGISTRY:
        raise ParameterError(f"no custom feature map registered under {name!r}")
    return _CUSTOM_REGISTRY[name]


def phi(feature_map, full_context, observed, arm):
    """Feature vector Phi(Y, a).  Pure; identical inputs give identical
    outputs bit for bit."""
    if not isinstance(arm, (int, np.integer)) or isinstance(arm, bool):
        raise InputError(f"arm must be an integer index, got {arm!r}")
    arm = int(arm)
    if not 0 <= arm < feature_map.arm_count:
        raise InputError(
            f"arm index {arm} out of range for {feature_map.arm_count} arms"
        )
    y = np.atleast_1d(np.asarray(full_context, dtype=float))
    expected = feature_map.d_s + feature_map.d_w
    if y.shape != (expected,):
        raise InputError(f"full context must have shape ({expected},), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InputError("full context contains non-finite entries")

    kind = feature_map.kind
    if kind is MapKind.SYNTHETIC_INTERACTION:
        s, w = y[0], y[1]
        a = -1.0 if arm == 0 else 1.0
        return np.array([1.0, s, w, s * a])
    if kind is MapKind.LOWER_BOUND_TWO_ARM:
        d_lin = feature_map.params["d_lin"]
        if arm == 0:
            return y.copy()
        out = np.zeros(feature_map.output_dim)
        out[:d_lin] = -y[:d_lin]
        return out
    if kind is MapKind.IDENTITY:
        return y.copy()
    if kind is MapKind.CUSTOM:
        out = np.asarray(
            feature_map.params["fn"](y, np.asarray(observed, dtype=float), arm),
            dtype=float,
        )
        if out.shape != (feature_map.output_dim,):
            raise InputError(
                f"custom map returned shape {out.shape}, "
                f"expected ({feature_map.output_dim},)"
            )
        return out
    raise ParameterError(f"unknown feature map kind {kind!r}")


def arm_feature_matrix(feature_map, full_context, observed):
    """Stack of phi over all arm indices; row a is arm a's features."""
    return np.stack(
        [phi(feature_map, full_context, observed, a) for a in range(feature_map.arm_count)]
    )


def calibrate_feat_norm_bound(feature_map, step_fn, n_steps=10_000, quantile=0.999):
    """Empirical feature-norm bound B from a dry run.

    `step_fn()` must yield one (full_context, observed) pair per call from
    the target context law.  Returns (bound, diagnostics) where the bound
    is the `quantile` quantile of max-over-arms Euclidean feature norms and
    diagnostics reports the sup-norm violation rate of the nominal
    ||Phi||_inf <= 1 assumption (monitored, never enforced).
    """
    if n_steps < 1:
        raise ParameterError("n_steps must be positive")
    if not 0.0 < quantile <= 1.0:
        raise ParameterError("quantile must lie in (0, 1]")
    norms = np.empty(n_steps)
    inf_violations = 0
    for i in range(n_steps):
        y, s = step_fn()
        mat = arm_feature_matrix(feature_map, y, s)
        norms[i] = np.sqrt((mat * mat).sum(axis=1).max())
        if np.abs(mat).max() > 1.0:
            inf_violations += 1
    bound = float(np.quantile(norms, quantile))
    diagnostics = {
        "n_steps": int(n_steps),
        "quantile": float(quantile),
        "max_feature_norm": float(norms.max()),
        "sup_norm_violation_rate": inf_violations / n_steps,
    }
    return bound, diagnostics
