import math

import numpy as np
import pytest
from scipy import integrate

from pulsebandit import (
    GaussianConditional,
    HistoricalDataset,
    InputError,
    ParameterError,
    estimate_dt_band,
    fit_linear_ar,
    gaussian_dt,
    gaussian_kl,
    substream,
    tv_kl_check,
    unit_range_test_family,
)


def kl_quadrature(p, q):
    """Oracle: numerically integrate p(x) log(p(x)/q(x))."""

    def integrand(x):
        lp = -0.5 * ((x - p.mean) / p.sd) ** 2 - math.log(p.sd * math.sqrt(2 * math.pi))
        lq = -0.5 * ((x - q.mean) / q.sd) ** 2 - math.log(q.sd * math.sqrt(2 * math.pi))
        return math.exp(lp) * (lp - lq)

    lo = min(p.mean - 12 * p.sd, q.mean - 12 * q.sd)
    hi = max(p.mean + 12 * p.sd, q.mean + 12 * q.sd)
    val, err = integrate.quad(
        integrand, lo, hi, limit=400, points=[p.mean, q.mean],
        epsabs=1e-10, epsrel=1e-10,
    )
    assert err < 5e-7  # comfortably below the 1e-6 comparison tolerance
    return val


def test_gaussian_kl_worked_example():
    # equal unit variances, mean gap 2: KL = 2, divergence D = 1
    p = GaussianConditional(2.0, 1.0)
    q = GaussianConditional(0.0, 1.0)
    assert gaussian_kl(p, q) == pytest.approx(2.0, abs=1e-12)
    assert gaussian_dt(p, q) == pytest.approx(1.0, abs=1e-12)


def test_gaussian_kl_identical_is_exactly_zero():
    p = GaussianConditional(0.7, 0.3)
    assert gaussian_kl(p, GaussianConditional(0.7, 0.3)) == 0.0


def test_gaussian_kl_matches_quadrature():
    rng = substream(21, "kl")
    for _ in range(25):
        p = GaussianConditional(float(rng.normal(0, 2)), float(rng.uniform(0.2, 3)))
        q = GaussianConditional(float(rng.normal(0, 2)), float(rng.uniform(0.2, 3)))
        assert gaussian_kl(p, q) == pytest.approx(kl_quadrature(p, q), abs=1e-6)


def test_gaussian_validation():
    with pytest.raises(ParameterError):
        GaussianConditional(0.0, 0.0)
    with pytest.raises(ParameterError):
        GaussianConditional(float("nan"), 1.0)


def test_test_family_is_unit_range():
    rng = substream(22, "fam")
    xs = rng.normal(0, 5, 2000)
    for fn in unit_range_test_family():
        vals = fn(xs)
        assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_tv_kl_check_passes_on_true_divergence():
    # unit-variance pair with mean gap 1: TV = 2 Phi(1/2) - 1 ~ 0.3829,
    # sqrt(D) = sqrt(KL/2) = 0.5; indicator mean gaps stay below the bound
    truth = GaussianConditional(1.0, 1.0)
    model = GaussianConditional(0.0, 1.0)
    report = tv_kl_check(truth, model, n_samples=60_000, rng=substream(3, "tv"))
    assert report.passed
    from scipy.stats import norm

    tv = float(norm.cdf(0.5) - norm.cdf(-0.5))
    assert report.max_gap == pytest.approx(tv, abs=0.02)
    assert report.dt == pytest.approx(0.25, abs=1e-12)
    assert math.sqrt(report.dt) == pytest.approx(0.5, abs=1e-12)


def test_tv_kl_check_flags_planted_underreport():
    # claim a tiny divergence for a well-separated pair: must flag
    truth = GaussianConditional(2.0, 1.0)
    model = GaussianConditional(0.0, 1.0)
    report = tv_kl_check(
        truth, model, dt=1e-4, n_samples=60_000, rng=substream(4, "tv")
    )
    assert not report.passed
    assert report.max_gap > report.bound


def test_tv_kl_check_requires_dt_for_non_gaussian():
    class Sampler:
        def sample(self, rng, n):
            return rng.uniform(-1, 1, n)

    with pytest.raises(InputError):
        tv_kl_check(Sampler(), Sampler(), n_samples=1000, rng=substream(5, "tv"))


def make_band_dataset(rng, n, f, noise_sd=0.2):
    s = rng.uniform(-2.0, 2.0, (n, 1, 1))
    w = f(s) + rng.normal(0.0, noise_sd, (n, 1, 1))
    return HistoricalDataset(s=s, w=w)


def test_band_covers_known_function_mostly():
    rng = substream(31, "band")
    f = lambda s: 0.3 * s + 0.2 * np.sin(2.0 * s)
    hits = 0
    reps = 30
    for rep in range(reps):
        data = make_band_dataset(substream(31, "band", rep), 1500, f)
        band = estimate_dt_band(data, alpha=0.1, split_seed=rep)
        truth = f(band.grid[:, 0])[:, None]
        inside = np.abs(band.centers - truth) <= band.half_widths
        hits += bool(inside.all())
    assert hits / reps >= 0.8  # 1 - alpha - MC slack


def test_band_cross_term_zero_without_target():
    data = make_band_dataset(substream(32, "band"), 800, lambda s: 0.5 * s)
    band = estimate_dt_band(data, alpha=0.1)
    assert float(np.abs(band.cross_term).max()) == 0.0
    assert band.surrogate
    assert band.dhat == pytest.approx(float(band.half_widths.max()), abs=0)
    assert band.dhat_sq == pytest.approx(band.dhat**2, abs=0)


def test_band_with_linear_target_cross_term():
    # target audited on the second half: linear fit of a linear truth ->
    # cross term stays small relative to the band widths
    data = make_band_dataset(substream(33, "band"), 2000, lambda s: 0.4 * s, 0.1)
    band = estimate_dt_band(
        data,
        alpha=0.1,
        fit_target=lambda half: fit_linear_ar(half, lag=0),
    )
    assert float(band.cross_term.max()) < float(band.half_widths.max()) * 2.0
    assert band.metadata["target"] == "linear_ar"


def test_band_deterministic_given_split_seed():
    data = make_band_dataset(substream(34, "band"), 600, lambda s: np.cos(s))
    b1 = estimate_dt_band(data, split_seed=9, rng=substream(9, "boot"))
    b2 = estimate_dt_band(data, split_seed=9, rng=substream(9, "boot"))
    assert b1.dhat == b2.dhat
    np.testing.assert_array_equal(b1.half_widths, b2.half_widths)


def test_band_dhat_shrinks_with_more_data():
    f = lambda s: 0.3 * s
    small = []
    large = []
    for rep in range(5):
        d1 = make_band_dataset(substream(35, "band", rep), 400, f)
        d2 = make_band_dataset(substream(36, "band", rep), 6400, f)
        small.append(estimate_dt_band(d1, split_seed=rep).dhat)
        large.append(estimate_dt_band(d2, split_seed=rep).dhat)
    assert np.mean(large) < np.mean(small)


def test_band_rejects_bad_grid():
    data = make_band_dataset(substream(37, "band"), 100, lambda s: s)
    with pytest.raises(InputError):
        estimate_dt_band(data, query_points=np.zeros((5, 3)))
    with pytest.raises(ParameterError):
        estimate_dt_band(data, alpha=1.5)
    with pytest.raises(ParameterError):
        estimate_dt_band(data, bootstrap_draws=3)


def test_band_empirical_modulus_reports_refinement_stability():
    data = make_band_dataset(substream(38, "band"), 1200, lambda s: 0.2 * s)
    band = estimate_dt_band(data, alpha=0.1)
    # neighbouring grid points are a quarter-bandwidth apart; the sup can
    # move by at most one inter-point jump under refinement
    assert band.empirical_modulus < band.dhat
