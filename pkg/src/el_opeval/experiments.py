"""Coverage and comparison studies on the synthetic bandit.

Each study trains its target policies once under a dedicated seed and then
draws a fresh evaluation log per replicate. Replicate ``i`` at sample size
``n`` always uses the substream ``(EVAL, size_index, i)``, so reports do not
depend on how replicates are spread over worker processes.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .bandit_sim import (
    BanditEnvironment,
    RECIPES,
    Streams,
    build_logged_dataset,
    generate_log,
    mc_true_value,
    train_policy,
)
from .core import mele
from .errors import ELError, SolverFailure, ValidationError
from .intervals import wilks_interval
from .posterior import (
    DIFF,
    VALUE,
    Absolute,
    Relative,
    build_posterior,
    hpd_interval,
    prob_diff,
    prob_region,
    sub_support,
)

TRAIN, MC, EVAL = 11, 12, 13
DEFAULT_SIZES = (32, 64, 128, 256, 512, 1024, 2048)
MAX_FAILURE_RATE = 1e-3
WIDTH_QUANTILES = (5, 25, 50, 75, 95)


@dataclass(frozen=True)
class CoverageConfig:
    policy: str = "new"
    sizes: tuple[int, ...] = DEFAULT_SIZES
    levels: tuple[float, ...] = (0.90, 0.95)
    replicates: int = 2000
    seed: int = 20240101
    grid_points: int = 10_000
    quantile: float = 0.9999
    mc_points: int = 1_000_000
    workers: int = 1
    env: BanditEnvironment = field(default_factory=BanditEnvironment)

    def __post_init__(self):
        if self.policy not in RECIPES:
            raise ValidationError(f"unknown policy recipe {self.policy!r}")
        if any(not 0.0 < lv < 1.0 for lv in self.levels):
            raise ValidationError("levels must lie in (0, 1)")
        if any(n < 2 for n in self.sizes):
            raise ValidationError("sample sizes must be at least 2")
        if self.replicates < 0:
            raise ValidationError("replicates must be non-negative")


@dataclass(frozen=True)
class ComparisonConfig:
    sizes: tuple[int, ...] = (400,)
    margins: tuple[float, ...] = (0.0, 0.05, 0.10)
    replicates: int = 500
    seed: int = 20240101
    grid_points_joint: int = 1_000
    grid_points_diff: int = 10_000
    quantile: float = 0.9999
    mc_points: int = 1_000_000
    workers: int = 1
    # compare the baseline recipe with itself instead of with the new one
    self_compare: bool = False
    env: BanditEnvironment = field(default_factory=BanditEnvironment)

    def __post_init__(self):
        if self.replicates < 0:
            raise ValidationError("replicates must be non-negative")
        if any(n < 2 for n in self.sizes):
            raise ValidationError("sample sizes must be at least 2")


@dataclass(frozen=True)
class StudyPolicies:
    policies: tuple
    true_values: tuple[float, ...]
    names: tuple[str, ...]


def study_policies(env: BanditEnvironment, names: Sequence[str], seed: int, mc_points: int) -> StudyPolicies:
    """Train each recipe once and fix its Monte Carlo true value."""
    root = Streams(seed)
    pols, vals = [], []
    for name in names:
        pol = train_policy(env, name, int(root.generator(TRAIN).integers(2**63 - 1)))
        pols.append(pol)
        vals.append(mc_true_value(pol, env, mc_points, root.child(MC, len(vals))))
    return StudyPolicies(tuple(pols), tuple(vals), tuple(names))


# ---------------------------------------------------------------------------
# replicate runners (module level so worker processes can import them)


def _replicate_log(env, seed, size_index, rep, n):
    return generate_log(env, n, Streams(seed).child(EVAL, size_index, rep))


def _coverage_replicate(job):
    cfg, pols, size_index, n, rep = job
    try:
        log = _replicate_log(cfg.env, cfg.seed, size_index, rep, n)
        ds = build_logged_dataset(log, pols.policies, cfg.env)
        post = build_posterior(ds, VALUE, grid_points=cfg.grid_points, quantile=cfg.quantile)
        out = {}
        for lv in cfg.levels:
            alpha = 1.0 - lv
            h = hpd_interval(post, alpha)
            w = wilks_interval(ds, alpha)
            out[lv] = ((h.lo, h.hi), (w.lo, w.hi))
        ss = post.support.intervals[0]
        return rep, out, (ss.lo, ss.hi)
    except ELError as exc:
        return rep, exc, None


def _comparison_replicate(job):
    cfg, pols, size_index, n, rep = job
    try:
        log = _replicate_log(cfg.env, cfg.seed, size_index, rep, n)
        ds = build_logged_dataset(log, pols.policies, cfg.env)
        joint = build_posterior(ds, VALUE, grid_points=cfg.grid_points_joint, quantile=cfg.quantile)
        diff = build_posterior(ds, DIFF, grid_points=cfg.grid_points_diff, quantile=cfg.quantile)
        rows = {}
        for delta in cfg.margins:
            rows[delta] = (
                prob_region(joint, Absolute(delta)),
                prob_region(joint, Relative(delta)),
                prob_diff(diff, delta),
            )
        return rep, rows, None
    except ELError as exc:
        return rep, exc, None


def _run_jobs(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    chunk = max(1, len(jobs) // (8 * workers))
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, jobs, chunksize=chunk))


def _check_failures(failed: int, total: int) -> None:
    if total and failed / total >= MAX_FAILURE_RATE and failed > 0:
        raise SolverFailure(f"{failed} of {total} replicates failed (limit {MAX_FAILURE_RATE:.1%})")


# ---------------------------------------------------------------------------
# coverage study


@dataclass
class CoverageReport:
    rows: list[dict]
    true_value: float
    config: dict

    def row(self, method: str, level: float, n: int) -> dict:
        for r in self.rows:
            if r["method"] == method and math.isclose(r["level"], level) and r["n"] == n:
                return r
        raise KeyError((method, level, n))


def _summarize_widths(widths: np.ndarray) -> dict:
    if widths.size == 0:
        return {f"width_q{q}": float("nan") for q in WIDTH_QUANTILES} | {"mean_width": float("nan")}
    qs = np.percentile(widths, WIDTH_QUANTILES)
    out = {f"width_q{q}": float(v) for q, v in zip(WIDTH_QUANTILES, qs)}
    out["mean_width"] = float(widths.mean())
    return out


def coverage_run(cfg: CoverageConfig, policies: StudyPolicies | None = None, keep_raw: bool = False) -> CoverageReport:
    """Coverage and width of HPD and Wilks intervals for one fixed learned policy."""
    pols = policies or study_policies(cfg.env, [cfg.policy], cfg.seed, cfg.mc_points)
    truth = pols.true_values[0]
    rows = []
    for si, n in enumerate(cfg.sizes):
        if cfg.replicates == 0:
            continue
        jobs = [(cfg, pols, si, n, rep) for rep in range(cfg.replicates)]
        results = sorted(_run_jobs(_coverage_replicate, jobs, cfg.workers), key=lambda t: t[0])
        ok = [r for r in results if not isinstance(r[1], Exception)]
        failed = len(results) - len(ok)
        _check_failures(failed, len(results))
        for lv in cfg.levels:
            for mi, method in enumerate(("hpd", "wilks")):
                ivs = np.array([r[1][lv][mi] for r in ok]).reshape(-1, 2)
                hit = (ivs[:, 0] <= truth) & (truth <= ivs[:, 1])
                R = hit.size
                cov = float(hit.mean()) if R else float("nan")
                row = {
                    "policy": cfg.policy,
                    "method": method,
                    "level": lv,
                    "n": n,
                    "coverage": cov,
                    "mc_se": math.sqrt(cov * (1 - cov) / R) if R else float("nan"),
                    "replicates": R,
                    "failures": failed,
                }
                row.update(_summarize_widths(ivs[:, 1] - ivs[:, 0]))
                if keep_raw:
                    row["intervals"] = ivs
                rows.append(row)
    return CoverageReport(rows, truth, _config_dict(cfg))


# ---------------------------------------------------------------------------
# comparison study


@dataclass
class ComparisonReport:
    rows: list[dict]
    true_values: tuple[float, ...]
    config: dict
    raw: dict = field(default_factory=dict, repr=False)


MODES = ("absolute", "relative", "diff")


def comparison_run(cfg: ComparisonConfig, policies: StudyPolicies | None = None) -> ComparisonReport:
    """Posterior improvement probabilities of the new policy over the baseline."""
    names = ["baseline", "baseline"] if cfg.self_compare else ["baseline", "new"]
    if policies is None:
        if cfg.self_compare:
            base = study_policies(cfg.env, ["baseline"], cfg.seed, cfg.mc_points)
            policies = StudyPolicies(base.policies * 2, base.true_values * 2, tuple(names))
        else:
            policies = study_policies(cfg.env, names, cfg.seed, cfg.mc_points)
    rows, raw = [], {}
    for si, n in enumerate(cfg.sizes):
        if cfg.replicates == 0:
            continue
        jobs = [(cfg, policies, si, n, rep) for rep in range(cfg.replicates)]
        results = sorted(_run_jobs(_comparison_replicate, jobs, cfg.workers), key=lambda t: t[0])
        ok = [r for r in results if not isinstance(r[1], Exception)]
        failed = len(results) - len(ok)
        _check_failures(failed, len(results))
        # probs[rep, margin, mode]
        probs = np.array([[r[1][dl] for dl in cfg.margins] for r in ok]).reshape(len(ok), len(cfg.margins), 3)
        raw[n] = probs
        for di, delta in enumerate(cfg.margins):
            for mi, mode in enumerate(MODES):
                p = probs[:, di, mi]
                rows.append({
                    "n": n,
                    "margin": delta,
                    "mode": mode,
                    "mean": float(p.mean()) if p.size else float("nan"),
                    "band_lo": float(np.percentile(p, 2.5)) if p.size else float("nan"),
                    "band_hi": float(np.percentile(p, 97.5)) if p.size else float("nan"),
                    "replicates": int(p.size),
                    "failures": failed,
                })
            gap = np.abs(probs[:, di, 2] - probs[:, di, 0])
            rows.append({
                "n": n,
                "margin": delta,
                "mode": "abs_gap_diff_vs_joint",
                "mean": float(gap.mean()) if gap.size else float("nan"),
                "band_lo": float(np.percentile(gap, 2.5)) if gap.size else float("nan"),
                "band_hi": float(np.percentile(gap, 97.5)) if gap.size else float("nan"),
                "replicates": int(gap.size),
                "failures": failed,
            })
    return ComparisonReport(rows, policies.true_values, _config_dict(cfg), raw)


# ---------------------------------------------------------------------------
# presets


COVERAGE_PRESETS = {
    # paper scale: full ladder, 10 000 replicates, both policies run separately
    "paper": dict(replicates=10_000, sizes=DEFAULT_SIZES),
    # desk scale used by the acceptance suite
    "desk": dict(replicates=2000, sizes=(64, 2048)),
    "quick": dict(replicates=200, sizes=(64, 512, 2048), grid_points=2000),
    # configuration where the Wilks interval undercovers most
    "undercoverage": dict(policy="new", replicates=2000, sizes=(DEFAULT_SIZES[0],)),
}


def coverage_preset(name: str, **overrides) -> CoverageConfig:
    if name not in COVERAGE_PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(COVERAGE_PRESETS)}")
    return CoverageConfig(**{**COVERAGE_PRESETS[name], **overrides})


def default_workers() -> int:
    env = os.environ.get("EL_OPEVAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"EL_OPEVAL_THREADS must be an integer, got {env!r}") from None
    return 1


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    d["env"] = asdict(cfg.env)
    return d
