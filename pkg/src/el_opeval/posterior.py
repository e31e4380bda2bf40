"""Adaptive sub-supports, grid posteriors and posterior queries.

The posterior over policy values is prior x empirical likelihood, evaluated
on an equispaced grid that covers the region where the likelihood ratio to
its maximum exceeds ``1/c``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp, xlog1py, xlogy, betaln

from . import _solver
from .core import (
    DIFF_DIRECTION,
    LoggedDataset,
    MAX_ITER,
    TOL_GRAD,
    log_el_diff_grid,
    log_el_value_grid,
    mele,
)
from .errors import (
    AllCellsInfeasible,
    EmptyConditioningEvent,
    MaxIterationsExceeded,
    SolverFailure,
    ValidationError,
    WrongPolicyCount,
)
from .intervals import chi2_quantile

VALUE = "value"
DIFF = "diff"
DEFAULT_QUANTILE = 0.9999
# cells this far below the maximum log-EL underflow to zero mass anyway
TRUNCATION_NATS = 800.0
_TIE_RTOL = 1e-12
# at c = 1 the sub-support dual has no attained optimum (the superlevel set is
# the MELE set itself); the set is continuous in c and this floor moves the
# endpoints by O(sqrt(1e-12 / n))
_MIN_LOG_C = 1e-12


class Interval(NamedTuple):
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, other: "Interval", tol: float = 0.0) -> bool:
        return self.lo - tol <= other.lo and other.hi <= self.hi + tol


def _check_mode(ds: LoggedDataset, mode: str) -> None:
    if mode not in (VALUE, DIFF):
        raise ValidationError(f"unknown mode {mode!r}; expected 'value' or 'diff'")
    if mode == DIFF and ds.policy_count != 2:
        raise WrongPolicyCount(f"difference mode needs exactly 2 policies, got {ds.policy_count}")
    if mode == VALUE and ds.policy_count > 2:
        raise ValidationError("joint posteriors are supported for at most 2 policies")


# ---------------------------------------------------------------------------
# adaptive sub-support


def _sub_support_rows(ds: LoggedDataset, u_data, u_vert, sign: float):
    """Rows of the dual in (gamma, beta) for the extreme of sum u r Q."""
    W, r, cnt = ds.atoms
    Wc = ds.support.weight_vertices
    Wv = np.repeat(Wc, 2, axis=0)
    rv = np.tile([0.0, 1.0], Wc.shape[0])
    # beta_j is redundant when the axis is pinned at 1 in data and support
    keep = [not (np.all(W[:, j] == 1.0) and np.all(Wc[:, j] == 1.0)) for j in range(W.shape[1])]
    A = np.column_stack([np.ones(W.shape[0]), W[:, keep]])
    C = np.column_stack([np.ones(Wv.shape[0]), Wv[:, keep]])
    a = sign * u_data * r
    b = sign * u_vert(Wv) * rv
    lin = -np.concatenate([[1.0], np.ones(int(np.sum(keep)))])
    return (np.ascontiguousarray(A), np.ascontiguousarray(a), cnt,
            np.ascontiguousarray(C), np.ascontiguousarray(b), lin)


def _extreme(ds: LoggedDataset, u_data, u_vert, sign: float, log_c: float) -> float:
    m = mele(ds)
    coef = math.exp(-(m.dual_value + log_c) / ds.n)
    if coef == 0.0 or not math.isfinite(coef):
        raise SolverFailure("sub-support coefficient under/overflowed")
    A, a, cnt, C, b, lin = _sub_support_rows(ds, u_data, u_vert, sign)
    theta0 = np.zeros(A.shape[1])
    theta0[0] = 1.0 + max(0.0, -a.min(), -b.min())
    theta, _, val, status, _ = _solver.ipm(
        1, A, a, cnt, C, b, lin, coef, theta0, 1e-1, TOL_GRAD, 4 * MAX_ITER, np.inf
    )
    if status == _solver.MAX_ITER:
        raise MaxIterationsExceeded("sub-support dual did not converge", best_value=sign * val)
    if status != _solver.CONVERGED:
        raise SolverFailure(f"sub-support dual ended with status {status}")
    return sign * float(val)


def sub_support_dual(ds: LoggedDataset, dim: int, log_c: float, mode: str = VALUE) -> Interval:
    """Range of one value coordinate (or of the difference) over ``L >= L*/c``.

    In value mode ``dim`` selects the policy; in difference mode it is ignored.
    """
    _check_mode(ds, mode)
    if not log_c >= 0.0:
        raise ValidationError(f"log_c must be non-negative, got {log_c}")
    log_c = max(float(log_c), _MIN_LOG_C)
    W = ds.atoms[0]
    if mode == VALUE:
        if not 0 <= dim < ds.policy_count:
            raise ValidationError(f"dimension {dim} out of range")
        u_data = W[:, dim]
        u_vert = lambda Wv: Wv[:, dim]  # noqa: E731
        box = (0.0, 1.0)
    else:
        u_data = W @ DIFF_DIRECTION
        u_vert = lambda Wv: Wv @ DIFF_DIRECTION  # noqa: E731
        box = (-1.0, 1.0)
    lo = _extreme(ds, u_data, u_vert, 1.0, log_c)
    hi = _extreme(ds, u_data, u_vert, -1.0, log_c)
    lo = min(max(lo, box[0]), box[1])
    hi = min(max(hi, box[0]), box[1])
    if hi < lo:  # only possible through rounding when the range is a point
        lo = hi = 0.5 * (lo + hi)
    return Interval(lo, hi)


@dataclass(frozen=True)
class SubSupport:
    intervals: tuple[Interval, ...]
    threshold_log_c: float
    phi: float
    mode: str = VALUE

    @property
    def lo(self) -> np.ndarray:
        return np.array([iv.lo for iv in self.intervals])

    @property
    def hi(self) -> np.ndarray:
        return np.array([iv.hi for iv in self.intervals])


def threshold_log_c(ds: LoggedDataset, mode: str, quantile: float) -> float:
    k = 1 if (mode == DIFF or ds.policy_count == 1) else 2
    return 0.5 * chi2_quantile(k, quantile)


def sub_support(ds: LoggedDataset, mode: str = VALUE, quantile: float = DEFAULT_QUANTILE) -> SubSupport:
    """Smallest box containing every parameter whose EL ratio exceeds ``1/c``."""
    _check_mode(ds, mode)
    if not 0.0 < quantile < 1.0:
        raise ValidationError(f"quantile {quantile} outside (0, 1)")
    log_c = threshold_log_c(ds, mode, quantile)
    if mode == DIFF:
        ivs = (sub_support_dual(ds, 0, log_c, DIFF),)
    else:
        ivs = tuple(sub_support_dual(ds, j, log_c) for j in range(ds.policy_count))
    return SubSupport(ivs, log_c, mele(ds).max_loglik - log_c, mode)


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class Flat:
    def log_density(self, points: np.ndarray, mode: str) -> np.ndarray:
        return np.zeros(points.shape[0])


@dataclass(frozen=True)
class BetaProduct:
    """Independent Beta(a_j, b_j) priors; difference mode uses (d + 1) / 2."""

    params: tuple[tuple[float, float], ...]

    def __post_init__(self):
        params = tuple((float(a), float(b)) for a, b in self.params)
        if any(not (a > 0 and b > 0) for a, b in params):
            raise ValidationError(f"Beta parameters must be positive, got {params}")
        object.__setattr__(self, "params", params)

    def log_density(self, points: np.ndarray, mode: str) -> np.ndarray:
        x = (points + 1.0) / 2.0 if mode == DIFF else points
        if x.shape[1] != len(self.params):
            raise ValidationError(f"prior has {len(self.params)} factors for {x.shape[1]} dimensions")
        out = np.zeros(x.shape[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            for j, (a, b) in enumerate(self.params):
                xj = x[:, j]
                val = xlogy(a - 1.0, xj) + xlog1py(b - 1.0, -xj) - betaln(a, b)
                out += np.where((xj >= 0.0) & (xj <= 1.0), val, -np.inf)
        return out


@dataclass(frozen=True, eq=False)
class Tabulated:
    """Prior density tabulated on its own axes, linearly interpolated; zero outside."""

    grid: tuple[np.ndarray, ...]
    values: np.ndarray

    def __post_init__(self):
        grid = tuple(np.asarray(g, dtype=float) for g in self.grid)
        values = np.asarray(self.values, dtype=float)
        if values.shape != tuple(g.shape[0] for g in grid):
            raise ValidationError("tabulated prior values do not match the grid shape")
        if np.any(values < 0.0) or not np.all(np.isfinite(values)):
            raise ValidationError("tabulated prior must be finite and non-negative")
        total = values
        for axis in reversed(range(len(grid))):
            total = np.trapezoid(total, grid[axis], axis=axis) if hasattr(np, "trapezoid") else np.trapz(total, grid[axis], axis=axis)
        if not (np.isfinite(total) and total > 0.0):
            raise ValidationError("tabulated prior must integrate to a positive finite number")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def log_density(self, points: np.ndarray, mode: str) -> np.ndarray:
        interp = RegularGridInterpolator(self.grid, self.values, bounds_error=False, fill_value=0.0)
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(interp(points), 0.0))


PriorSpec = Union[Flat, BetaProduct, Tabulated]


# ---------------------------------------------------------------------------
# grid posterior


@dataclass(frozen=True, eq=False)
class GridPosterior:
    """Posterior on an equispaced grid of cell centres.

    ``cell_mass`` has one entry per cell with the last axis varying fastest;
    ``log_density`` is log prior + log-EL ratio at the cell centres.
    """

    axes: tuple[np.ndarray, ...]
    widths: tuple[float, ...]
    log_density: np.ndarray
    log_norm: float
    cell_mass: np.ndarray
    mode: str
    support: SubSupport = field(repr=False)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.axes)

    def centers(self) -> np.ndarray:
        """Cell centres, one row per cell, in ``cell_mass`` order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def mean(self) -> np.ndarray:
        return self.cell_mass @ self.centers()

    def mode_point(self) -> np.ndarray:
        return self.centers()[int(np.argmax(self.cell_mass))]

    def marginal(self, axis: int) -> "GridPosterior":
        if self.ndim == 1:
            return self
        mass = self.cell_mass.reshape(self.shape).sum(axis=1 - axis)
        with np.errstate(divide="ignore"):
            ld = np.log(mass)
        iv = self.support.intervals[axis]
        sub = SubSupport((iv,), self.support.threshold_log_c, self.support.phi, self.mode)
        return GridPosterior((self.axes[axis],), (self.widths[axis],), ld, self.log_norm, mass, self.mode, sub)


def _axis(iv: Interval, points: int) -> tuple[np.ndarray, float]:
    width = (iv.hi - iv.lo) / points
    if width <= 0.0:
        return np.array([iv.lo]), 0.0
    return iv.lo + (np.arange(points) + 0.5) * width, width


def build_posterior(
    ds: LoggedDataset,
    mode: str = VALUE,
    prior: PriorSpec | None = None,
    grid_points: int | None = None,
    quantile: float = DEFAULT_QUANTILE,
    workers: int = 1,
    support: SubSupport | None = None,
) -> GridPosterior:
    """Grid posterior over the adaptive sub-support.

    ``grid_points`` counts cells per axis (default 10 000 for one dimension
    and 1 000 per axis for two). A zero-width sub-support yields a single
    cell carrying all the mass.
    """
    _check_mode(ds, mode)
    prior = Flat() if prior is None else prior
    ndim = 1 if mode == DIFF else ds.policy_count
    if grid_points is None:
        grid_points = 10_000 if ndim == 1 else 1_000
    if grid_points < 100:
        raise ValidationError(f"need at least 100 grid points per axis, got {grid_points}")
    ss = sub_support(ds, mode, quantile) if support is None else support
    built = [_axis(iv, grid_points) for iv in ss.intervals]
    axes = tuple(a for a, _ in built)
    widths = tuple(w for _, w in built)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    top = mele(ds).max_loglik
    floor = top - TRUNCATION_NATS
    strip = axes[-1].shape[0]
    if mode == DIFF:
        ll = log_el_diff_grid(ds, pts[:, 0], strip_len=strip, floor=floor, workers=workers)
    else:
        ll = log_el_value_grid(ds, pts, strip_len=strip, floor=floor, workers=workers)
    ld = prior.log_density(pts, mode) + (ll - top)
    peak = np.max(ld)
    if not np.isfinite(peak):
        raise AllCellsInfeasible("every grid cell has zero posterior density")
    mass = np.exp(ld - peak)
    total = mass.sum()
    mass /= total
    volume = float(np.prod([w for w in widths if w > 0.0])) if any(w > 0.0 for w in widths) else 1.0
    log_norm = float(peak + math.log(total) + math.log(volume))
    return GridPosterior(axes, widths, ld, log_norm, mass, mode, ss)


# ---------------------------------------------------------------------------
# queries


def hpd_interval(post: GridPosterior, alpha: float) -> Interval:
    """Highest-posterior-density interval of a one-dimensional grid posterior.

    Cells enter by decreasing density. Cells tied with the last one admitted
    all enter together and are then trimmed alternately from the two ends of
    the admitted set while the retained mass stays at least ``1 - alpha``.
    """
    if post.ndim != 1:
        raise ValidationError("HPD interval needs a one-dimensional posterior")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha {alpha} outside (0, 1)")
    mass = post.cell_mass
    centers = post.axes[0]
    target = 1.0 - alpha
    order = np.argsort(-mass, kind="stable")
    sorted_mass = mass[order]
    cum = np.cumsum(sorted_mass)
    k = int(np.searchsorted(cum, target * (1.0 - 1e-15), side="left"))
    k = min(k, mass.shape[0] - 1)
    level = sorted_mass[k]
    tied = np.abs(mass - level) <= _TIE_RTOL * level
    include = mass > level * (1.0 + _TIE_RTOL)
    include |= tied
    total = float(mass[include].sum())
    idx = np.flatnonzero(include)
    left, right = int(idx[0]), int(idx[-1])
    from_left = True
    while left < right:
        progressed = False
        for side in ((0, 1) if from_left else (1, 0)):
            cell = left if side == 0 else right
            if tied[cell] and include[cell] and total - mass[cell] >= target * (1.0 - 1e-15):
                include[cell] = False
                total -= mass[cell]
                progressed = True
                break
        if not progressed:
            break
        from_left = not from_left
        idx = np.flatnonzero(include)
        left, right = int(idx[0]), int(idx[-1])
    return Interval(float(centers[left]), float(centers[right]))


@dataclass(frozen=True)
class Absolute:
    """v_new > v_baseline + delta."""

    delta: float

    def holds(self, v1, v2):
        return v2 > v1 + self.delta


@dataclass(frozen=True)
class Relative:
    """v_new > (1 + delta) v_baseline."""

    delta: float

    def holds(self, v1, v2):
        return v2 > (1.0 + self.delta) * v1


@dataclass(frozen=True)
class HalfPlane:
    """a v_baseline + b v_new > c."""

    a: float
    b: float
    c: float

    def holds(self, v1, v2):
        return self.a * v1 + self.b * v2 > self.c


@dataclass(frozen=True)
class Complement:
    query: object

    def holds(self, v1, v2):
        return ~self.query.holds(v1, v2)


@dataclass(frozen=True)
class Conditional:
    region: object
    given: object


Query = Union[Absolute, Relative, HalfPlane, Complement, Conditional]


def prob_region(post: GridPosterior, query: Query) -> float:
    """Posterior probability of a region of the (baseline, new) value plane."""
    if post.ndim != 2:
        raise ValidationError("region queries need a two-dimensional posterior")
    pts = post.centers()
    v1, v2 = pts[:, 0], pts[:, 1]
    if isinstance(query, Conditional):
        given = query.given.holds(v1, v2)
        den = float(post.cell_mass[given].sum())
        if den < 1e-12:
            raise EmptyConditioningEvent(f"conditioning event has mass {den:.3g}")
        both = given & query.region.holds(v1, v2)
        return float(post.cell_mass[both].sum()) / den
    return float(post.cell_mass[query.holds(v1, v2)].sum())


def prob_diff(post: GridPosterior, delta: float) -> float:
    """P(d > delta) from a difference-mode posterior."""
    if post.mode != DIFF or post.ndim != 1:
        raise ValidationError("prob_diff needs a difference-mode posterior")
    return float(post.cell_mass[post.axes[0] > delta].sum())


def prob_greater(post: GridPosterior, delta: float) -> float:
    """P(v > delta) from a one-dimensional posterior of either mode."""
    if post.ndim != 1:
        raise ValidationError("needs a one-dimensional posterior")
    return float(post.cell_mass[post.axes[0] > delta].sum())
