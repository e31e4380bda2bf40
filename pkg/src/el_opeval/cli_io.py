"""Command-line surface, run configuration, CSV ingestion and result emission.

CSV files are UTF-8 with LF line endings and a period decimal separator;
numbers are written with 17 significant digits so they read back exactly.
Every run writes ``summary.json``, validated against the schema shipped in
``el_opeval/data/summary.schema.json``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .bandit_sim import (
    RECIPES,
    TRAIN_TAGS,
    BanditEnvironment,
    BanditLog,
    Recipe,
    Streams,
    build_logged_dataset,
    generate_log,
    mc_true_value,
    oracle_policy,
    train_policy,
)
from .core import LoggedDataset, build_dataset, is_estimate, mele, snis_estimate
from .errors import ConfigMismatch, CsvParseError, ELError, ValidationError, WrongPolicyCount
from .experiments import (
    COVERAGE_PRESETS,
    EVAL,
    MC,
    TRAIN,
    ComparisonConfig,
    ComparisonReport,
    CoverageReport,
    comparison_run,
    coverage_preset,
    coverage_run,
)
from .intervals import WilksInterval, wilks_interval, wilks_threshold_ratio
from .posterior import (
    DIFF,
    VALUE,
    Absolute,
    BetaProduct,
    Flat,
    GridPosterior,
    Interval,
    Relative,
    Tabulated,
    build_posterior,
    hpd_interval,
    prob_diff,
    prob_region,
)

U64_MAX = 2**64 - 1
DEFAULT_SEED = 20240101
THREADS_ENV = "EL_OPEVAL_THREADS"


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Every setting a CLI run can take, from flags or a JSON config file.

    ``None`` means "use the default of the command or preset".
    """

    seed: int = DEFAULT_SEED
    threads: int | None = None
    out: str = "."
    # data input
    data: str | None = None
    format: str = "weighted"
    bounds: tuple[tuple[float, float], ...] | None = None
    # inference
    alphas: tuple[float, ...] = (0.05, 0.10)
    grid: int | None = None
    quantile: float = 0.9999
    prior: str = "flat"
    mode: str = "joint"
    margins: tuple[float, ...] = (0.0, 0.05, 0.10)
    relative: bool = False
    # simulation and experiments
    n: int = 1000
    policy: tuple[str, ...] | None = None
    train_n: int | None = None
    mc_points: int = 1_000_000
    preset: str = "paper"
    replicates: int | None = None
    sizes: tuple[int, ...] | None = None
    grid_joint: int = 1_000
    grid_diff: int = 10_000
    self_compare: bool = False
    env: dict = field(default_factory=dict)
    plots: bool = False

    def __post_init__(self):
        _check_int("seed", self.seed, 0, U64_MAX)
        if self.threads is not None:
            _check_int("threads", self.threads, 1, 4096)
        if self.format not in ("weighted", "raw"):
            raise ValidationError(f"format must be 'weighted' or 'raw', got {self.format!r}")
        if self.mode not in ("joint", "diff"):
            raise ValidationError(f"mode must be 'joint' or 'diff', got {self.mode!r}")
        if self.bounds is not None:
            object.__setattr__(self, "bounds", _pairs(self.bounds))
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
            raise ValidationError(f"alpha levels must lie in (0, 1), got {alphas}")
        object.__setattr__(self, "alphas", alphas)
        for name in ("grid",):
            if getattr(self, name) is not None:
                _check_int(name, getattr(self, name), 100, 10**7)
        _check_int("grid_joint", self.grid_joint, 100, 10**5)
        _check_int("grid_diff", self.grid_diff, 100, 10**7)
        if not 0.0 < float(self.quantile) < 1.0:
            raise ValidationError(f"quantile must lie in (0, 1), got {self.quantile}")
        margins = tuple(float(m) for m in self.margins)
        if any(not -1.0 <= m <= 1.0 for m in margins):
            raise ValidationError(f"margins must lie in [-1, 1], got {margins}")
        object.__setattr__(self, "margins", margins)
        _check_int("n", self.n, 2, 10**9)
        if self.train_n is not None:
            _check_int("train_n", self.train_n, 2, 10**9)
        _check_int("mc_points", self.mc_points, 1, 10**10)
        if self.preset not in COVERAGE_PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}; choose from {sorted(COVERAGE_PRESETS)}")
        if self.replicates is not None:
            _check_int("replicates", self.replicates, 0, 10**7)
        if self.sizes is not None:
            sizes = tuple(self.sizes)
            for s in sizes:
                _check_int("sizes", s, 2, 10**9)
            object.__setattr__(self, "sizes", sizes)
        if self.policy is not None:
            pol = (self.policy,) if isinstance(self.policy, str) else tuple(self.policy)
            for p in pol:
                parse_policy_spec(p)
            object.__setattr__(self, "policy", pol)
        unknown = set(self.env) - {f.name for f in dataclasses.fields(BanditEnvironment)}
        if unknown:
            raise ValidationError(f"unknown environment keys {sorted(unknown)}")
        BanditEnvironment(**self.env)

    @property
    def environment(self) -> BanditEnvironment:
        return BanditEnvironment(**self.env)

    @property
    def workers(self) -> int:
        if self.threads is not None:
            return self.threads
        raw = os.environ.get(THREADS_ENV)
        if raw:
            try:
                return max(1, int(raw))
            except ValueError:
                raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        return 1

    def as_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


_CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def _check_int(name: str, value: Any, lo: int, hi: int) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if not lo <= value <= hi:
        raise ValidationError(f"{name} must lie in [{lo}, {hi}], got {value}")


def _pairs(bounds) -> tuple[tuple[float, float], ...]:
    """Accept [[lo, hi], ...] or a flat [lo, hi, lo, hi, ...]."""
    flat = list(bounds)
    if flat and all(isinstance(b, (int, float)) for b in flat):
        if len(flat) % 2:
            raise ValidationError(f"bounds need lo,hi pairs, got {len(flat)} numbers")
        flat = [flat[i:i + 2] for i in range(0, len(flat), 2)]
    out = []
    for pair in flat:
        if len(pair) != 2:
            raise ValidationError(f"bounds need lo,hi pairs, got {pair!r}")
        lo, hi = float(pair[0]), float(pair[1])
        if not 0.0 <= lo <= hi or not math.isfinite(hi):
            raise ValidationError(f"invalid bounds ({lo}, {hi})")
        out.append((lo, hi))
    if not out:
        raise ValidationError("bounds must not be empty")
    return tuple(out)


def load_config(path: str | os.PathLike) -> dict:
    """Read a JSON config file; unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    return raw


def make_config(file_values: dict | None = None, flags: dict | None = None) -> RunConfig:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    merged = dict(file_values or {})
    merged.update(flags or {})
    unknown = set(merged) - _CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}")
    for key in ("alphas", "margins", "sizes"):
        if key in merged and merged[key] is not None:
            merged[key] = tuple(merged[key])
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# CSV ingestion and export


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = None
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if header is None:
                header = [c.strip() for c in row]
            else:
                rows.append((line, row))
    if header is None:
        raise CsvParseError("file is empty", 1)
    return header, rows


def _number(cell: str, line: int, column: int) -> float:
    try:
        x = float(cell)
    except ValueError:
        raise CsvParseError(f"not a number: {cell!r}", line, column) from None
    if not math.isfinite(x):
        raise CsvParseError(f"not a finite number: {cell!r}", line, column)
    return x


def _parse_table(path, fixed: Sequence[str], prefix: str) -> tuple[list[str], np.ndarray, list[int]]:
    """Numeric table whose header is ``fixed`` followed by ``prefix_1..prefix_l``."""
    header, rows = _read_rows(path)
    nf = len(fixed)
    if header[:nf] != list(fixed):
        raise CsvParseError(f"header must start with {','.join(fixed)}, got {','.join(header)}", 1)
    tail = header[nf:]
    if not tail or tail != [f"{prefix}_{j + 1}" for j in range(len(tail))]:
        raise CsvParseError(f"expected columns {prefix}_1..{prefix}_l after {','.join(fixed)}", 1)
    width = len(header)
    data = np.empty((len(rows), width))
    lines = []
    for k, (line, row) in enumerate(rows):
        if len(row) != width:
            raise CsvParseError(f"expected {width} fields, got {len(row)}", line)
        for c, cell in enumerate(row):
            data[k, c] = _number(cell.strip(), line, c + 1)
        lines.append(line)
    return header, data, lines


def _check_bounds(bounds, ell: int):
    if bounds is None:
        raise ConfigMismatch("weight bounds are required for a weighted CSV")
    bounds = _pairs(bounds)
    if len(bounds) != ell:
        raise ConfigMismatch(f"data has {ell} weight columns but {len(bounds)} bound pairs were given")
    return bounds


def ingest_weighted_csv(path, bounds) -> LoggedDataset:
    """Read ``reward,w_1,...,w_l`` rows into a dataset on the box ``bounds``."""
    _, data, _ = _parse_table(path, ["reward"], "w")
    bounds = _check_bounds(bounds, data.shape[1] - 1)
    return build_dataset(data[:, 1:], data[:, 0], bounds)


@dataclass(frozen=True)
class RawLog:
    actions: np.ndarray
    rewards: np.ndarray
    behavior: np.ndarray
    targets: np.ndarray  # (n, l)

    @property
    def weights(self) -> np.ndarray:
        return self.targets / self.behavior[:, None]


def read_raw_csv(path) -> RawLog:
    """Read ``action,reward,behavior_prob,target_prob_1,...`` rows and check the probabilities."""
    _, data, lines = _parse_table(path, ["action", "reward", "behavior_prob"], "target_prob")
    for k, line in enumerate(lines):
        a, b, t = data[k, 0], data[k, 2], data[k, 3:]
        if a != math.floor(a):
            raise CsvParseError(f"action must be an integer label, got {a}", line, 1)
        if b == 0.0:
            raise CsvParseError("behavior probability is zero; the importance weight is undefined", line, 3)
        if not 0.0 < b <= 1.0:
            raise CsvParseError(f"behavior probability {b} outside (0, 1]", line, 3)
        bad = np.flatnonzero(~((t >= 0.0) & (t <= 1.0)))
        if bad.size:
            c = int(bad[0])
            raise CsvParseError(f"target probability {t[c]} outside [0, 1]", line, 4 + c)
        if not 0.0 <= data[k, 1] <= 1.0:
            raise CsvParseError(f"reward {data[k, 1]} outside [0, 1]", line, 2)
    return RawLog(data[:, 0].astype(np.int64), data[:, 1], data[:, 2], data[:, 3:])


def ingest_raw_csv(path, bounds=None) -> LoggedDataset:
    """Importance weights target / behavior from a raw log.

    Without explicit ``bounds`` each policy gets ``[0, 1 / min behavior prob]``,
    the largest weight the logging design allows.
    """
    raw = read_raw_csv(path)
    ell = raw.targets.shape[1]
    if bounds is None:
        if raw.behavior.size == 0:
            raise ValidationError("raw CSV has no data rows")
        bounds = [(0.0, float(1.0 / raw.behavior.min()))] * ell
    bounds = _check_bounds(bounds, ell)
    return build_dataset(raw.weights, raw.rewards, bounds)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])


def export_weighted_csv(ds: LoggedDataset, path) -> None:
    header = ["reward"] + [f"w_{j + 1}" for j in range(ds.policy_count)]
    _write_csv(path, header, (np.concatenate([[r], w]) for r, w in zip(ds.rewards, ds.weights)))


def export_raw_csv(log: BanditLog, policies, path) -> None:
    idx = np.arange(log.n)
    targets = np.column_stack([pol.probs(log.z)[idx, log.arm] for pol in policies])
    header = ["action", "reward", "behavior_prob"] + [f"target_prob_{j + 1}" for j in range(targets.shape[1])]
    rows = (
        [str(int(a)), _fmt(r), _fmt(p)] + [_fmt(t) for t in trow]
        for a, r, p, trow in zip(log.arm, log.reward, log.propensity, targets)
    )
    _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# priors and policy specs


def parse_prior(spec: str, ndim: int):
    """``flat``, ``beta:a,b`` (shared by all axes) or ``beta:a1,b1,a2,b2``, or ``table:<csv>``."""
    if spec == "flat":
        return Flat()
    kind, _, arg = spec.partition(":")
    if kind == "beta":
        try:
            vals = [float(x) for x in arg.split(",")]
        except ValueError:
            raise ValidationError(f"cannot parse Beta prior {spec!r}") from None
        if len(vals) == 2:
            vals = vals * ndim
        if len(vals) != 2 * ndim:
            raise ValidationError(f"Beta prior needs 2 or {2 * ndim} parameters, got {len(vals)}")
        return BetaProduct(tuple(zip(vals[0::2], vals[1::2])))
    if kind == "table":
        return read_prior_table(arg, ndim)
    raise ValidationError(f"unknown prior {spec!r}; use flat, beta:a,b or table:<csv>")


def read_prior_table(path, ndim: int) -> Tabulated:
    """Prior density on a regular grid in long format: ``x_1,...,x_k,density``."""
    header, rows = _read_rows(path)
    if len(header) != ndim + 1 or header[-1] != "density":
        raise CsvParseError(f"prior table needs {ndim} coordinate columns and a density column", 1)
    data = np.array([[_number(c.strip(), line, j + 1) for j, c in enumerate(row)] for line, row in rows])
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValidationError(f"{path}: prior table is empty")
    axes = [np.unique(data[:, j]) for j in range(ndim)]
    shape = tuple(a.size for a in axes)
    if int(np.prod(shape)) != data.shape[0]:
        raise ValidationError(f"{path}: prior table is not a complete regular grid")
    order = np.lexsort(tuple(data[:, j] for j in reversed(range(ndim))))
    values = data[order, -1].reshape(shape)
    return Tabulated(tuple(axes), values)


def parse_policy_spec(spec: str) -> tuple[str, Recipe | None]:
    """``baseline``, ``new``, ``oracle`` or ``custom:m,s,kprime``."""
    if spec in RECIPES:
        return spec, RECIPES[spec]
    if spec == "oracle":
        return spec, None
    kind, _, arg = spec.partition(":")
    if kind == "custom":
        parts = arg.split(",")
        try:
            m, s, k = float(parts[0]), float(parts[1]), int(parts[2])
        except (ValueError, IndexError):
            raise ValidationError(f"custom policy needs m,s,kprime, got {arg!r}") from None
        if len(parts) != 3 or k < 1 or s <= 0:
            raise ValidationError(f"custom policy needs m,s>0,kprime>=1, got {arg!r}")
        return spec, Recipe(RECIPES["baseline"].train_size, m, s, k)
    raise ValidationError(f"unknown policy {spec!r}; use baseline, new, oracle or custom:m,s,kprime")


# ---------------------------------------------------------------------------
# single-run results


def level_key(alpha: float) -> str:
    """90 for alpha 0.10, 97.5 for alpha 0.025."""
    pct = round(100.0 * (1.0 - alpha), 6)
    return str(int(pct)) if pct == int(pct) else f"{pct:g}"


@dataclass
class EvalResult:
    ds: LoggedDataset
    posterior: GridPosterior
    hpd: dict[float, Interval]
    wilks: dict[float, WilksInterval]


def run_eval(ds: LoggedDataset, cfg: RunConfig) -> EvalResult:
    if ds.policy_count != 1:
        raise WrongPolicyCount(f"eval handles one policy, the data has {ds.policy_count}; use compare")
    prior = parse_prior(cfg.prior, 1)
    post = build_posterior(ds, VALUE, prior, cfg.grid, cfg.quantile, cfg.workers)
    hpd = {a: hpd_interval(post, a) for a in cfg.alphas}
    wilks = {a: wilks_interval(ds, a) for a in cfg.alphas}
    return EvalResult(ds, post, hpd, wilks)


@dataclass
class CompareResult:
    ds: LoggedDataset
    posterior: GridPosterior
    mode: str
    relative: bool
    probabilities: dict[float, float]


def run_compare(ds: LoggedDataset, cfg: RunConfig) -> CompareResult:
    if ds.policy_count != 2:
        raise WrongPolicyCount(f"compare needs two policies, the data has {ds.policy_count}")
    if cfg.mode == "diff":
        if cfg.relative:
            raise ValidationError("relative margins need the joint posterior (--mode joint)")
        prior = parse_prior(cfg.prior, 1)
        grid = cfg.grid or 10_000
        post = build_posterior(ds, DIFF, prior, grid, cfg.quantile, cfg.workers)
        probs = {m: prob_diff(post, m) for m in cfg.margins}
    else:
        prior = parse_prior(cfg.prior, 2)
        grid = cfg.grid or 1_000
        post = build_posterior(ds, VALUE, prior, grid, cfg.quantile, cfg.workers)
        query = Relative if cfg.relative else Absolute
        probs = {m: prob_region(post, query(m)) for m in cfg.margins}
    return CompareResult(ds, post, cfg.mode, cfg.relative, probs)


@dataclass
class SimulationResult:
    log: BanditLog
    ds: LoggedDataset
    names: tuple[str, ...]
    true_values: tuple[float, ...]
    mc_se: tuple[float, ...]
    recipes: tuple[Recipe | None, ...]
    policies: tuple = field(repr=False, default=())


def run_simulate(cfg: RunConfig) -> SimulationResult:
    """Train the requested policies, fix their values by Monte Carlo, draw a log."""
    env = cfg.environment
    root = Streams(cfg.seed)
    train_seed = int(root.generator(TRAIN).integers(2**63 - 1))
    specs = cfg.policy or ("new",)
    pols, vals, ses, recipes = [], [], [], []
    for j, spec in enumerate(specs):
        name, recipe = parse_policy_spec(spec)
        if recipe is None:
            pol = oracle_policy(env)
        else:
            if cfg.train_n is not None:
                recipe = dataclasses.replace(recipe, train_size=cfg.train_n)
            pol = train_policy(env, recipe, train_seed, TRAIN_TAGS.get(name, 100))
        val, se = mc_true_value(pol, env, cfg.mc_points, root.child(MC, j), cfg.workers, return_se=True)
        pols.append(pol)
        vals.append(val)
        ses.append(se)
        recipes.append(recipe)
    log = generate_log(env, cfg.n, root.child(EVAL))
    ds = build_logged_dataset(log, pols, env)
    return SimulationResult(log, ds, tuple(specs), tuple(vals), tuple(ses), tuple(recipes), tuple(pols))


# ---------------------------------------------------------------------------
# emission


def _jsonable(obj):
    """Plain JSON values; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, BanditEnvironment):
        return _jsonable(dataclasses.asdict(obj))
    return obj


def summary_schema() -> dict:
    text = resources.files("el_opeval").joinpath("data/summary.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_summary(summary: dict) -> None:
    jsonschema.validate(summary, summary_schema())


def _box_fields(ds: LoggedDataset, single: bool) -> dict:
    m = mele(ds)
    lo, hi = m.value_box[:, 0], m.value_box[:, 1]
    is_, snis = is_estimate(ds), snis_estimate(ds)
    if single:
        return {"mele_lo": lo[0], "mele_hi": hi[0], "is": is_[0], "snis": snis[0]}
    return {"mele_lo": lo, "mele_hi": hi, "is": is_, "snis": snis}


def _posterior_diagnostics(post: GridPosterior, ds: LoggedDataset) -> dict:
    m = mele(ds)
    return {
        "max_loglik": m.max_loglik,
        "mele_unique": m.unique,
        "residual_mass": m.residual_mass,
        "log_norm": post.log_norm,
        "threshold_log_c": post.support.threshold_log_c,
        "grid_shape": list(post.shape),
        "truncated_cells": int(np.count_nonzero(~np.isfinite(post.log_density))),
    }


def summarize(result, cfg: RunConfig) -> dict:
    """The summary.json payload of a result, without the timestamp."""
    if isinstance(result, EvalResult):
        out = {"kind": "eval", "n": result.ds.n}
        out.update(_box_fields(result.ds, True))
        for a in cfg.alphas:
            key = level_key(a)
            h, w = result.hpd[a], result.wilks[a]
            out[f"hpd_{key}"] = [h.lo, h.hi]
            out[f"wilks_{key}"] = [w.lo, w.hi]
        iv = result.posterior.support.intervals[0]
        out["sub_support"] = [iv.lo, iv.hi]
        out["posterior_mean"] = float(result.posterior.mean()[0])
        diag = _posterior_diagnostics(result.posterior, result.ds)
        diag["wilks_threshold_ratio"] = {level_key(a): wilks_threshold_ratio(a) for a in cfg.alphas}
        out["diagnostics"] = diag
    elif isinstance(result, CompareResult):
        out = {"kind": "compare", "n": result.ds.n, "mode": result.mode, "relative": result.relative}
        out.update(_box_fields(result.ds, False))
        out["probabilities"] = [{"margin": m, "probability": p} for m, p in result.probabilities.items()]
        out["sub_support"] = [[iv.lo, iv.hi] for iv in result.posterior.support.intervals]
        out["diagnostics"] = _posterior_diagnostics(result.posterior, result.ds)
    elif isinstance(result, SimulationResult):
        pols = []
        for name, val, se, rec in zip(result.names, result.true_values, result.mc_se, result.recipes):
            entry = {"name": name, "true_value": val, "mc_se": se}
            if rec is not None:
                entry["recipe"] = dataclasses.asdict(rec)
            pols.append(entry)
        out = {
            "kind": "simulate",
            "n": result.ds.n,
            "policies": pols,
            "bounds": [list(b) for b in result.ds.support.bounds],
            "files": {"weighted": "logged.csv", "raw": "raw.csv"},
            "is": is_estimate(result.ds),
            "snis": snis_estimate(result.ds),
            "diagnostics": {"mean_weight": result.ds.weights.mean(axis=0)},
        }
    elif isinstance(result, CoverageReport):
        out = {
            "kind": "coverage",
            "true_value": result.true_value,
            "rows": [{k: v for k, v in r.items() if k != "intervals"} for r in result.rows],
            "study": result.config,
            "diagnostics": {"failures": sum(r["failures"] for r in result.rows)},
        }
    elif isinstance(result, ComparisonReport):
        out = {
            "kind": "compare-experiment",
            "true_values": list(result.true_values),
            "rows": result.rows,
            "study": result.config,
            "diagnostics": {"failures": sum(r["failures"] for r in result.rows)},
        }
    else:
        raise ValidationError(f"cannot emit {type(result).__name__}")
    out["seed"] = cfg.seed
    out["config"] = cfg.as_dict()
    return _jsonable(out)


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_summary(summary: dict, outdir) -> Path:
    payload = dict(summary)
    payload["timestamp"] = _timestamp()
    validate_summary(payload)
    path = Path(outdir) / "summary.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def write_posterior_csv(post: GridPosterior, path) -> None:
    if post.mode == DIFF:
        names = ["d"]
    elif post.ndim == 1:
        names = ["v"]
    else:
        names = [f"v_{j + 1}" for j in range(post.ndim)]
    pts = post.centers()
    _write_csv(path, names + ["mass"], (np.append(p, m) for p, m in zip(pts, post.cell_mass)))


_COVERAGE_COLUMNS = (
    "policy", "method", "level", "n", "coverage", "mc_se", "replicates", "failures",
    "width_q5", "width_q25", "width_q50", "width_q75", "width_q95", "mean_width",
)
_COMPARISON_COLUMNS = ("n", "margin", "mode", "mean", "band_lo", "band_hi", "replicates", "failures")


def _report_rows(rows, columns):
    for r in rows:
        yield [r[c] if isinstance(r[c], str) else (str(r[c]) if isinstance(r[c], int) else r[c]) for c in columns]


def emit_results(result, outdir, cfg: RunConfig | None = None, plots: bool | None = None) -> dict[str, Path]:
    """Write summary.json plus the tables (and optional SVG charts) for ``result``."""
    cfg = cfg or RunConfig()
    plots = cfg.plots if plots is None else plots
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {}
    if isinstance(result, (EvalResult, CompareResult)):
        files["posterior"] = outdir / "posterior.csv"
        write_posterior_csv(result.posterior, files["posterior"])
    elif isinstance(result, SimulationResult):
        files["weighted"] = outdir / "logged.csv"
        export_weighted_csv(result.ds, files["weighted"])
        files["raw"] = outdir / "raw.csv"
        export_raw_csv(result.log, result.policies, files["raw"])
    elif isinstance(result, CoverageReport):
        files["coverage"] = outdir / "coverage.csv"
        _write_csv(files["coverage"], _COVERAGE_COLUMNS, _report_rows(result.rows, _COVERAGE_COLUMNS))
    elif isinstance(result, ComparisonReport):
        files["comparison"] = outdir / "comparison.csv"
        _write_csv(files["comparison"], _COMPARISON_COLUMNS, _report_rows(result.rows, _COMPARISON_COLUMNS))
    files["summary"] = write_summary(summarize(result, cfg), outdir)
    if plots:
        from . import charts

        files.update(charts.render(result, outdir, cfg.alphas))
    return files


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _env(text: str) -> dict:
    out = {}
    for item in text.split(","):
        key, eq, val = item.partition("=")
        if not eq:
            raise argparse.ArgumentTypeError(f"expected key=value pairs, got {item!r}")
        key = key.strip()
        try:
            out[key] = int(val) if key in ("K", "d") else float(val)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad value for {key}: {val!r}") from None
    return out


def _add_globals(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="master seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, default=S, help=f"worker count (fallback: ${THREADS_ENV})")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--config", dest="config_file", default=S, help="JSON config file; flags override it")
    p.add_argument("--plots", action="store_true", default=S, help="also write SVG charts")


def _add_data(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--data", default=S, help="input CSV")
    p.add_argument("--format", choices=("weighted", "raw"), default=S)
    p.add_argument("--bounds", type=_floats, default=S, help="weight bounds lo,hi[,lo,hi]")
    p.add_argument("--prior", default=S, help="flat | beta:a,b | table:<csv>")
    p.add_argument("--grid", type=int, default=S, help="grid cells per axis")
    p.add_argument("--quantile", type=float, default=S, help="sub-support chi-square level")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(
        prog="el-opeval",
        description="Empirical-likelihood inference for off-policy evaluation of bandit policies.",
    )
    _add_globals(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="posterior, HPD and Wilks intervals for one policy")
    _add_globals(p)
    _add_data(p)
    p.add_argument("--alpha", dest="alphas", type=_floats, default=S, help="e.g. 0.05,0.10")

    p = sub.add_parser("compare", help="improvement probabilities of policy 2 over policy 1")
    _add_globals(p)
    _add_data(p)
    p.add_argument("--mode", choices=("joint", "diff"), default=S)
    p.add_argument("--margins", type=_floats, default=S, help="e.g. 0,0.05,0.10")
    p.add_argument("--relative", action="store_true", default=S, help="relative margins (joint mode)")

    p = sub.add_parser("simulate", help="train policies, export a logged dataset, report true values")
    _add_globals(p)
    p.add_argument("--n", type=int, default=S, help="evaluation log size")
    p.add_argument("--policy", action="append", default=S,
                   help="baseline | new | oracle | custom:m,s,kprime (repeat for several)")
    p.add_argument("--train-n", dest="train_n", type=int, default=S)
    p.add_argument("--mc-points", dest="mc_points", type=int, default=S)
    p.add_argument("--env", type=_env, default=S, help="environment overrides, e.g. K=10,beta1=3")

    p = sub.add_parser("coverage", help="coverage and width study of HPD and Wilks intervals")
    _add_globals(p)
    p.add_argument("--preset", choices=sorted(COVERAGE_PRESETS), default=S)
    p.add_argument("--replicates", type=int, default=S)
    p.add_argument("--sizes", type=_ints, default=S)
    p.add_argument("--policy", action="append", default=S, help="baseline | new")
    p.add_argument("--alpha", dest="alphas", type=_floats, default=S)
    p.add_argument("--grid", type=int, default=S)
    p.add_argument("--quantile", type=float, default=S)
    p.add_argument("--mc-points", dest="mc_points", type=int, default=S)
    p.add_argument("--env", type=_env, default=S)

    p = sub.add_parser("compare-experiment", help="joint versus difference comparison study")
    _add_globals(p)
    p.add_argument("--replicates", type=int, default=S)
    p.add_argument("--sizes", type=_ints, default=S)
    p.add_argument("--margins", type=_floats, default=S)
    p.add_argument("--grid-joint", dest="grid_joint", type=int, default=S)
    p.add_argument("--grid-diff", dest="grid_diff", type=int, default=S)
    p.add_argument("--quantile", type=float, default=S)
    p.add_argument("--mc-points", dest="mc_points", type=int, default=S)
    p.add_argument("--self-compare", dest="self_compare", action="store_true", default=S)
    p.add_argument("--env", type=_env, default=S)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config_file")}
    file_values = load_config(args.config_file) if getattr(args, "config_file", None) else {}
    return make_config(file_values, flags)


def _load_data(cfg: RunConfig) -> LoggedDataset:
    if cfg.data is None:
        raise ValidationError("--data is required")
    if cfg.format == "raw":
        return ingest_raw_csv(cfg.data, cfg.bounds)
    return ingest_weighted_csv(cfg.data, cfg.bounds)


def _coverage_config(cfg: RunConfig):
    over: dict[str, Any] = {"seed": cfg.seed, "workers": cfg.workers, "env": cfg.environment,
                            "quantile": cfg.quantile, "mc_points": cfg.mc_points,
                            "levels": tuple(sorted(1.0 - a for a in cfg.alphas))}
    if cfg.replicates is not None:
        over["replicates"] = cfg.replicates
    if cfg.sizes is not None:
        over["sizes"] = cfg.sizes
    if cfg.grid is not None:
        over["grid_points"] = cfg.grid
    if cfg.policy is not None:
        if len(cfg.policy) != 1 or cfg.policy[0] not in RECIPES:
            raise ValidationError(f"coverage takes one learned recipe ({', '.join(RECIPES)}), got {cfg.policy}")
        over["policy"] = cfg.policy[0]
    return coverage_preset(cfg.preset, **over)


def _comparison_config(cfg: RunConfig) -> ComparisonConfig:
    over: dict[str, Any] = {"seed": cfg.seed, "workers": cfg.workers, "env": cfg.environment,
                            "quantile": cfg.quantile, "margins": cfg.margins,
                            "grid_points_joint": cfg.grid_joint, "grid_points_diff": cfg.grid_diff,
                            "self_compare": cfg.self_compare, "mc_points": cfg.mc_points}
    if cfg.replicates is not None:
        over["replicates"] = cfg.replicates
    if cfg.sizes is not None:
        over["sizes"] = cfg.sizes
    return ComparisonConfig(**over)


def _echo(result, files: dict, stream) -> None:
    if isinstance(result, EvalResult):
        m = mele(result.ds)
        print(f"n = {result.ds.n}, MELE box [{m.value_box[0, 0]:.6g}, {m.value_box[0, 1]:.6g}]", file=stream)
        for a in sorted(result.hpd):
            h, w = result.hpd[a], result.wilks[a]
            print(f"{level_key(a)}%  HPD [{h.lo:.6g}, {h.hi:.6g}]  Wilks [{w.lo:.6g}, {w.hi:.6g}]", file=stream)
    elif isinstance(result, CompareResult):
        for mg, p in result.probabilities.items():
            print(f"margin {mg:g}: P(improvement) = {p:.6g}", file=stream)
    elif isinstance(result, SimulationResult):
        for name, v, se in zip(result.names, result.true_values, result.mc_se):
            print(f"{name}: true value {v:.6g} (MC se {se:.2g})", file=stream)
    print(f"wrote {', '.join(str(p) for p in files.values())}", file=stream)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        cmd = args.command
        if cmd == "eval":
            result = run_eval(_load_data(cfg), cfg)
        elif cmd == "compare":
            result = run_compare(_load_data(cfg), cfg)
        elif cmd == "simulate":
            result = run_simulate(cfg)
        elif cmd == "coverage":
            result = coverage_run(_coverage_config(cfg))
        else:
            result = comparison_run(_comparison_config(cfg))
        files = emit_results(result, cfg.out, cfg)
    except ELError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _echo(result, files, sys.stdout)
    return 0
