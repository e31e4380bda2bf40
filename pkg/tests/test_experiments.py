import math

import numpy as np
import pytest

from el_opeval import (
    BanditEnvironment,
    ComparisonConfig,
    CoverageConfig,
    build_logged_dataset,
    build_posterior,
    comparison_run,
    coverage_preset,
    coverage_run,
    hpd_interval,
    wilks_interval,
)
from el_opeval.errors import SolverFailure, ValidationError
from el_opeval.experiments import (
    COVERAGE_PRESETS,
    DEFAULT_SIZES,
    _check_failures,
    _replicate_log,
    default_workers,
    study_policies,
)

SMALL_MC = 20_000


@pytest.fixture(scope="module")
def new_policy():
    return study_policies(BanditEnvironment(), ["new"], 3, SMALL_MC)


@pytest.fixture(scope="module")
def coverage_small(new_policy):
    cfg = CoverageConfig(sizes=(64, 256), replicates=12, seed=3, grid_points=1000, mc_points=SMALL_MC)
    return coverage_run(cfg, new_policy, keep_raw=True)


@pytest.fixture(scope="module")
def comparison_small():
    cfg = ComparisonConfig(sizes=(150,), replicates=6, seed=4, grid_points_joint=120,
                           grid_points_diff=1000, mc_points=SMALL_MC)
    return comparison_run(cfg)


def test_coverage_rows(coverage_small):
    rows = coverage_small.rows
    assert len(rows) == 2 * 2 * 2
    for r in rows:
        assert 0.0 <= r["coverage"] <= 1.0
        assert r["replicates"] == 12 and r["failures"] == 0
        assert r["mc_se"] == pytest.approx(math.sqrt(r["coverage"] * (1 - r["coverage"]) / 12))
        qs = [r[f"width_q{q}"] for q in (5, 25, 50, 75, 95)]
        assert qs == sorted(qs) and qs[0] >= 0.0
        assert r["mean_width"] >= 0.0


def test_intervals_nest_across_levels(coverage_small):
    for method in ("hpd", "wilks"):
        for n in (64, 256):
            wide = coverage_small.row(method, 0.95, n)["intervals"]
            narrow = coverage_small.row(method, 0.90, n)["intervals"]
            assert np.all(wide[:, 0] <= narrow[:, 0] + 1e-12)
            assert np.all(narrow[:, 1] <= wide[:, 1] + 1e-12)


def test_widths_shrink_with_n(coverage_small):
    for method in ("hpd", "wilks"):
        assert coverage_small.row(method, 0.95, 256)["mean_width"] < coverage_small.row(method, 0.95, 64)["mean_width"]


def test_zero_replicates_gives_empty_report(new_policy):
    rep = coverage_run(CoverageConfig(sizes=(64,), replicates=0, mc_points=SMALL_MC), new_policy)
    assert rep.rows == []
    cmp_rep = comparison_run(ComparisonConfig(replicates=0, mc_points=SMALL_MC))
    assert cmp_rep.rows == [] and cmp_rep.raw == {}


def test_coverage_identical_for_any_worker_count(new_policy):
    cfg = CoverageConfig(sizes=(64,), replicates=4, seed=5, grid_points=1000, mc_points=SMALL_MC)
    one = coverage_run(cfg, new_policy, keep_raw=True)
    two = coverage_run(CoverageConfig(**{**cfg.__dict__, "workers": 2}), new_policy, keep_raw=True)
    for a, b in zip(one.rows, two.rows):
        assert np.array_equal(a.pop("intervals"), b.pop("intervals"))
        assert a == b


def test_same_seed_same_report(new_policy, coverage_small):
    cfg = CoverageConfig(sizes=(64, 256), replicates=12, seed=3, grid_points=1000, mc_points=SMALL_MC)
    again = coverage_run(cfg, new_policy, keep_raw=True)
    for a, b in zip(coverage_small.rows, again.rows):
        assert np.array_equal(a["intervals"], b["intervals"])


def test_study_policies_are_reproducible(new_policy):
    again = study_policies(BanditEnvironment(), ["new"], 3, SMALL_MC)
    assert again.true_values == new_policy.true_values
    assert np.array_equal(again.policies[0].coef, new_policy.policies[0].coef)


def test_margin_monotone_per_replicate(comparison_small):
    probs = comparison_small.raw[150]
    assert probs.shape == (6, 3, 3)
    assert np.all(np.diff(probs, axis=1) <= 0.0)
    assert np.all((probs >= 0.0) & (probs <= 1.0))


def test_comparison_rows(comparison_small):
    modes = {r["mode"] for r in comparison_small.rows}
    assert modes == {"absolute", "relative", "diff", "abs_gap_diff_vs_joint"}
    for r in comparison_small.rows:
        assert r["band_lo"] <= r["mean"] <= r["band_hi"]
        assert r["replicates"] == 6


def test_comparison_identical_for_any_worker_count():
    cfg = ComparisonConfig(sizes=(100,), replicates=3, seed=6, grid_points_joint=110,
                           grid_points_diff=1000, mc_points=SMALL_MC)
    one = comparison_run(cfg)
    two = comparison_run(ComparisonConfig(**{**cfg.__dict__, "workers": 2}))
    assert np.array_equal(one.raw[100], two.raw[100])
    assert one.rows == two.rows


def test_self_comparison_is_a_coin_flip():
    cfg = ComparisonConfig(sizes=(100,), replicates=8, seed=7, margins=(0.0,), grid_points_joint=120,
                           grid_points_diff=1000, mc_points=SMALL_MC, self_compare=True)
    rep = comparison_run(cfg)
    assert rep.true_values[0] == rep.true_values[1]
    for r in rep.rows:
        if r["mode"] in ("absolute", "relative", "diff"):
            assert r["mean"] == pytest.approx(0.5, abs=0.1)


def test_width_sanity_and_constant_threshold(new_policy):
    env = BanditEnvironment()
    thresholds = set()
    for rep in range(5):
        log = _replicate_log(env, 9, 0, rep, 64)
        ds = build_logged_dataset(log, new_policy.policies, env)
        post = build_posterior(ds, grid_points=1000)
        ss = post.support.intervals[0]
        for alpha in (0.05, 0.10):
            h = hpd_interval(post, alpha)
            w = wilks_interval(ds, alpha)
            assert h.hi - h.lo <= ss.width + 1e-12
            assert w.hi - w.lo <= ss.width + 1e-9
            if alpha == 0.05:
                thresholds.add(w.threshold_log)
    assert len(thresholds) == 1
    assert math.exp(thresholds.pop()) == pytest.approx(0.14650, abs=5e-6)


def test_failure_budget():
    _check_failures(0, 2000)
    _check_failures(1, 2000)
    with pytest.raises(SolverFailure):
        _check_failures(2, 2000)
    with pytest.raises(SolverFailure):
        _check_failures(1, 10)


def test_presets():
    assert COVERAGE_PRESETS["paper"]["replicates"] == 10_000
    assert coverage_preset("paper").sizes == DEFAULT_SIZES
    assert coverage_preset("desk").sizes == (64, 2048)
    assert coverage_preset("undercoverage").sizes == (32,)
    assert coverage_preset("quick", replicates=5).replicates == 5
    with pytest.raises(ValidationError):
        coverage_preset("huge")


def test_config_validation():
    with pytest.raises(ValidationError):
        CoverageConfig(policy="nope")
    with pytest.raises(ValidationError):
        CoverageConfig(levels=(1.0,))
    with pytest.raises(ValidationError):
        CoverageConfig(replicates=-1)
    with pytest.raises(ValidationError):
        ComparisonConfig(sizes=(1,))


def test_default_workers(monkeypatch):
    monkeypatch.delenv("EL_OPEVAL_THREADS", raising=False)
    assert default_workers() == 1
    monkeypatch.setenv("EL_OPEVAL_THREADS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("EL_OPEVAL_THREADS", "many")
    with pytest.raises(ValidationError):
        default_workers()
