import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import micro_datasets
from el_opeval import (
    build_dataset,
    build_posterior,
    chi2_quantile,
    hpd_interval,
    log_el_value,
    mele,
    normal_quantile,
    sub_support,
    wilks_interval,
)
from el_opeval.errors import UnsupportedDf, ValidationError
from el_opeval.intervals import wilks_threshold_ratio

mpmath.mp.dps = 40


def mp_normal_quantile(p):
    # root of the high-precision CDF; erfinv(2p - 1) loses tiny p to rounding
    p = mpmath.mpf(p)
    tail = min(p, 1 - p)
    x = -mpmath.sqrt(-2 * mpmath.log(tail))
    x = mpmath.findroot(lambda t: mpmath.log(mpmath.ncdf(t)) - mpmath.log(tail), x)
    return float(-x if p > 0.5 else x)


def mp_chi2_1(q):
    z = mpmath.sqrt(2) * mpmath.erfinv(mpmath.mpf(q))
    return float(z * z)


def bernoulli_ratio(k, n, v):
    p = k / n
    return k * np.log(v / p) + (n - k) * np.log((1 - v) / (1 - p))


# ---------------------------------------------------------------------------
# chi2_quantile and normal_quantile


def test_chi2_zero_quantile():
    assert chi2_quantile(1, 0.0) == 0.0
    assert chi2_quantile(2, 0.0) == 0.0


def test_chi2_two_df_closed_form():
    assert chi2_quantile(2, 0.9999) == pytest.approx(18.420681, abs=1e-6)
    assert abs(chi2_quantile(2, 0.9999) + 2 * math.log(1e-4)) < 1e-12


def test_chi2_one_df_95():
    assert chi2_quantile(1, 0.95) == pytest.approx(3.841459, abs=1e-6)
    assert chi2_quantile(1, 0.95) == pytest.approx(mp_chi2_1(0.95), rel=1e-9)


@pytest.mark.parametrize("q", [0.5, 0.8, 0.9, 0.95, 0.99, 0.999, 0.9999, 0.999999])
def test_chi2_one_df_against_high_precision(q):
    assert chi2_quantile(1, q) == pytest.approx(mp_chi2_1(q), rel=1e-9)


@settings(max_examples=300)
@given(st.floats(1e-300, 1 - 1e-16))
def test_normal_quantile_against_high_precision(p):
    want = mp_normal_quantile(p)
    assert normal_quantile(p) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_normal_quantile_edges():
    assert normal_quantile(0.5) == 0.0
    assert normal_quantile(0.0) == -math.inf
    assert normal_quantile(1.0) == math.inf
    with pytest.raises(ValidationError):
        normal_quantile(1.5)


def test_unsupported_df():
    with pytest.raises(UnsupportedDf):
        chi2_quantile(3, 0.5)


def test_quantile_level_range():
    with pytest.raises(ValidationError):
        chi2_quantile(1, 1.0)
    with pytest.raises(ValidationError):
        chi2_quantile(2, -0.1)


# ---------------------------------------------------------------------------
# wilks_interval


def test_threshold_relative_likelihood():
    assert wilks_threshold_ratio(0.05) == pytest.approx(0.14650, abs=5e-6)


def test_bernoulli_matches_grid_scan(bernoulli500):
    k = int(bernoulli500.rewards.sum())
    wi = wilks_interval(bernoulli500, 0.05)
    grid = np.arange(1, 100000) * 1e-5
    inside = grid[bernoulli_ratio(k, 500, grid) >= wi.threshold_log]
    assert wi.lo == pytest.approx(inside.min(), abs=1e-4)
    assert wi.hi == pytest.approx(inside.max(), abs=1e-4)
    assert wi.threshold_log == pytest.approx(-0.5 * 3.841459, abs=1e-6)


def test_interval_contains_mele_box(canonical):
    m = mele(canonical)
    wi = wilks_interval(canonical, 0.10)
    assert wi.lo <= m.value_box[0, 0] and m.value_box[0, 1] <= wi.hi


def test_wilks_needs_one_policy(canonical_pair):
    with pytest.raises(ValidationError):
        wilks_interval(canonical_pair, 0.05)


def test_wilks_rejects_bad_alpha(canonical):
    for a in (0.0, 1.0):
        with pytest.raises(ValidationError):
            wilks_interval(canonical, a)


@settings(max_examples=25)
@given(micro_datasets(ell=1, n_max=6), st.sampled_from([0.01, 0.05, 0.1, 0.3]))
def test_endpoints_on_threshold(data, alpha):
    W, r, bounds = data
    ds = build_dataset(W, r, bounds)
    wi = wilks_interval(ds, alpha)
    top = mele(ds).max_loglik
    for x in (wi.lo, wi.hi):
        if 0.0 < x < 1.0:
            assert log_el_value(ds, [x]) - top == pytest.approx(wi.threshold_log, abs=1e-4)


@settings(max_examples=25)
@given(micro_datasets(ell=1, n_max=6))
def test_nesting_and_containment(data):
    W, r, bounds = data
    ds = build_dataset(W, r, bounds)
    m = mele(ds)
    ss = sub_support(ds).intervals[0]
    prev = None
    for alpha in (0.3, 0.1, 0.05, 0.01, 0.001, 0.0001):
        wi = wilks_interval(ds, alpha)
        assert wi.lo <= m.value_box[0, 0] + 1e-12 and m.value_box[0, 1] <= wi.hi + 1e-12
        assert ss.lo - 1e-6 <= wi.lo and wi.hi <= ss.hi + 1e-6
        if prev is not None:
            assert wi.lo <= prev.lo + 1e-12 and prev.hi <= wi.hi + 1e-12
        prev = wi


def test_agrees_with_hpd_at_large_n():
    rng = np.random.default_rng(10_000)
    r = (rng.random(10_000) < 0.5).astype(float)
    ds = build_dataset(np.ones((10_000, 1)), r, [(1.0, 1.0)])
    post = build_posterior(ds, grid_points=2000)
    for alpha in (0.05, 0.10):
        wi, hpd = wilks_interval(ds, alpha), hpd_interval(post, alpha)
        assert abs(wi.lo - hpd.lo) < 0.01 and abs(wi.hi - hpd.hi) < 0.01
