"""Logged-data model and the empirical-likelihood evaluators.

All log-likelihood values returned here drop the data-dependent constant
(``sum c log c - n log n``) so only differences between them are meaningful.
A value of ``-inf`` marks a parameter that no probability measure on the box
support can reach.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from . import _solver
from .errors import (
    InconsistentBoundaryAllocation,
    MaxIterationsExceeded,
    NonPositiveLogArgument,
    SolverFailure,
    ValidationError,
    WrongPolicyCount,
    ZeroWeightSum,
)

NEG_INFINITY = float("-inf")

TOL_GRAD = 1e-9
MAX_ITER = 200
TOL_ACTIVE = 1e-7
TOL_MASS = 1e-8
DIFF_DIRECTION = np.array([-1.0, 1.0])
_BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class LoggedSample:
    reward: float
    weights: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ValidationError(f"reward {self.reward} outside [0, 1]")
        if any(not w >= 0.0 for w in self.weights):
            raise ValidationError(f"negative importance weight in {self.weights}")


@dataclass(frozen=True)
class BoxSupport:
    """Per-policy importance-weight bounds; rewards always live in [0, 1]."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not bounds:
            raise ValidationError("support needs at least one policy")
        for j, (lo, hi) in enumerate(bounds):
            if not (0.0 <= lo <= hi and math.isfinite(hi)):
                raise ValidationError(f"invalid weight bounds ({lo}, {hi}) for policy {j + 1}")
        object.__setattr__(self, "bounds", bounds)

    @property
    def policy_count(self) -> int:
        return len(self.bounds)

    @cached_property
    def weight_vertices(self) -> np.ndarray:
        """Corners of the weight box, collapsed axes de-duplicated."""
        axes = [sorted({lo, hi}) for lo, hi in self.bounds]
        return np.array(list(itertools.product(*axes)), dtype=float)

    def vertices(self) -> list[tuple[np.ndarray, float]]:
        return support_vertices(self)


def support_vertices(support: BoxSupport) -> list[tuple[np.ndarray, float]]:
    """All corners of the box support as (weight vector, reward) pairs.

    Lexicographic in the weight coordinates with the reward varying fastest.
    """
    return [(w.copy(), r) for w in support.weight_vertices for r in (0.0, 1.0)]


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """``n`` observations of (importance-weight vector, reward) on a box support."""

    weights: np.ndarray
    rewards: np.ndarray
    support: BoxSupport

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    @property
    def policy_count(self) -> int:
        return self.weights.shape[1]

    @property
    def samples(self) -> list[LoggedSample]:
        return [LoggedSample(float(r), tuple(map(float, w))) for w, r in zip(self.weights, self.rewards)]

    @cached_property
    def atoms(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distinct (weights, reward) rows with their multiplicities."""
        rows = np.column_stack([self.weights, self.rewards])
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
        return (
            np.ascontiguousarray(uniq[:, :-1]),
            np.ascontiguousarray(uniq[:, -1]),
            counts.astype(float),
        )

    def __eq__(self, other):
        if not isinstance(other, LoggedDataset):
            return NotImplemented
        return (
            self.support == other.support
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.rewards, other.rewards)
        )

    __hash__ = None


def build_dataset(weight_rows, rewards, support: BoxSupport | Sequence[tuple[float, float]]) -> LoggedDataset:
    """Validate raw arrays against ``support`` and freeze them into a dataset."""
    if not isinstance(support, BoxSupport):
        support = BoxSupport(tuple(support))
    w = np.array(weight_rows, dtype=float)
    r = np.array(rewards, dtype=float).reshape(-1)
    if w.ndim == 1:
        w = w.reshape(-1, 1)
    if w.ndim != 2 or w.shape[0] != r.shape[0]:
        raise ValidationError(f"weights shape {w.shape} does not match {r.shape[0]} rewards")
    if w.shape[1] != support.policy_count:
        raise ValidationError(
            f"weights have {w.shape[1]} columns but the support declares {support.policy_count} policies"
        )
    n = r.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 observations, got {n}")
    bad = np.flatnonzero(~((r >= 0.0) & (r <= 1.0)))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"reward outside [0, 1] at row {i}: {r[i]}")
    lo = np.array([b[0] for b in support.bounds])
    hi = np.array([b[1] for b in support.bounds])
    slack = _BOUND_SLACK * np.maximum(1.0, hi)
    outside = ~((w >= lo - slack) & (w <= hi + slack))
    if outside.any():
        i, j = map(int, np.argwhere(outside)[0])
        raise ValidationError(
            f"weight outside support at row {i}, column {j}: {w[i, j]} not in [{lo[j]}, {hi[j]}]"
        )
    w = np.clip(w, lo, hi)
    w.setflags(write=False)
    r.setflags(write=False)
    return LoggedDataset(w, r, support)


@dataclass(frozen=True)
class DualPoint:
    beta: np.ndarray
    tau: np.ndarray


@dataclass(frozen=True)
class DualSolution:
    """Outcome of one dual solve; ``value`` is the attained supremum."""

    value: float
    theta: np.ndarray
    multipliers: np.ndarray
    status: int
    iterations: int

    @property
    def loglik(self) -> float:
        return NEG_INFINITY if self.status == _solver.DIVERGED else -self.value

    @property
    def converged(self) -> bool:
        return self.status == _solver.CONVERGED


def dual_objective(ds: LoggedDataset, v, point: DualPoint):
    """Value, gradient and Hessian of sum_i log(1 + beta.(w_i - 1) + tau.(w_i r_i - v)).

    Derivatives are with respect to the stacked vector (beta, tau).
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    beta = np.atleast_1d(np.asarray(point.beta, dtype=float))
    tau = np.atleast_1d(np.asarray(point.tau, dtype=float))
    X = np.column_stack([ds.weights - 1.0, ds.weights * ds.rewards[:, None] - v])
    g = 1.0 + X @ np.concatenate([beta, tau])
    if np.any(g <= 0.0):
        i = int(np.argmin(g))
        raise NonPositiveLogArgument(f"log argument {g[i]} at row {i} is not positive")
    value = float(np.sum(np.log(g)))
    grad = X.T @ (1.0 / g)
    hess = -(X / g[:, None] ** 2).T @ X
    return value, grad, hess


# ---------------------------------------------------------------------------
# dual problem assembly

@dataclass(frozen=True)
class _DualProblem:
    A0: np.ndarray  # data rows before the parameter shift
    cnt: np.ndarray
    C0: np.ndarray  # vertex rows before the parameter shift
    free: np.ndarray  # mask of unpinned variables (full dimension)
    shift_cols: np.ndarray  # columns receiving the parameter shift (reduced indexing)

    def rows(self, shift: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self.shift_vector(shift)
        return np.ascontiguousarray(self.A0 - s), np.ascontiguousarray(self.C0 - s)

    def shift_vector(self, shift) -> np.ndarray:
        s = np.zeros(self.A0.shape[1])
        s[self.shift_cols] = shift
        return s


def _pin_redundant(A0: np.ndarray, C0: np.ndarray, n_beta: int):
    """Drop weight-constraint columns that vanish on every data and vertex row."""
    free = np.ones(A0.shape[1], dtype=bool)
    for j in range(n_beta):
        if not A0[:, j].any() and not C0[:, j].any():
            free[j] = False
    return free


def _assemble(A0, cnt, C0, n_beta):
    # corners whose reward does not enter (zero weight, or equal weights in
    # the difference) repeat a row; two copies of an active constraint make
    # the Newton system singular
    _, first = np.unique(C0, axis=0, return_index=True)
    C0 = C0[np.sort(first)]
    free = _pin_redundant(A0, C0, n_beta)
    A0 = np.ascontiguousarray(A0[:, free])
    C0 = np.ascontiguousarray(C0[:, free])
    n_shift = free.shape[0] - n_beta
    shift_cols = np.arange(A0.shape[1] - n_shift, A0.shape[1])
    return _DualProblem(A0, cnt, C0, free, shift_cols)


def _vertex_rows(support: BoxSupport):
    verts = support_vertices(support)
    Wv = np.array([w for w, _ in verts])
    rv = np.array([r for _, r in verts])
    return Wv, rv


def _value_problem(ds: LoggedDataset) -> _DualProblem:
    cache = ds.__dict__.setdefault("_problems", {})
    if "value" not in cache:
        W, r, cnt = ds.atoms
        Wv, rv = _vertex_rows(ds.support)
        A0 = np.column_stack([W - 1.0, W * r[:, None]])
        C0 = np.column_stack([Wv - 1.0, Wv * rv[:, None]])
        cache["value"] = _assemble(A0, cnt, C0, ds.policy_count)
    return cache["value"]


def _diff_problem(ds: LoggedDataset) -> _DualProblem:
    if ds.policy_count != 2:
        raise WrongPolicyCount(f"difference likelihood needs exactly 2 policies, got {ds.policy_count}")
    cache = ds.__dict__.setdefault("_problems", {})
    if "diff" not in cache:
        W, r, cnt = ds.atoms
        Wv, rv = _vertex_rows(ds.support)
        A0 = np.column_stack([W - 1.0, (W @ DIFF_DIRECTION) * r])
        C0 = np.column_stack([Wv - 1.0, (Wv @ DIFF_DIRECTION) * rv])
        cache["diff"] = _assemble(A0, cnt, C0, 2)
    return cache["diff"]


def _solve(prob: _DualProblem, shift, start=None, max_iter: int = MAX_ITER) -> DualSolution:
    A, C = prob.rows(np.atleast_1d(np.asarray(shift, dtype=float)))
    d = A.shape[1]
    a = np.ones(A.shape[0])
    b = np.ones(C.shape[0])
    theta0 = np.zeros(d)
    mu0 = 1e-1
    if start is not None:
        theta0 = _solver._feasible_start(A, a, C, b, np.asarray(start, dtype=float)[prob.free], 1e-3)
        mu0 = 1e-4
    theta, lam, val, status, it = _solver.ipm(
        0, A, a, prob.cnt, C, b, np.zeros(d), 1.0, theta0, mu0, TOL_GRAD, max_iter, np.inf
    )
    if status == _solver.FAILED and start is not None:
        return _solve(prob, shift, None, max_iter)
    if status == _solver.MAX_ITER:
        raise MaxIterationsExceeded(f"dual solver did not converge in {max_iter} iterations", best_value=-val)
    if status == _solver.FAILED:
        raise SolverFailure("dual solver left the feasible region")
    full = np.zeros(prob.free.shape[0])
    full[prob.free] = theta
    return DualSolution(float(val), full, lam, int(status), int(it))


def solve_value_dual(ds: LoggedDataset, v, start=None) -> DualSolution:
    """Dual solve behind :func:`log_el_value`; ``start`` is an optional warm start."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (ds.policy_count,):
        raise ValidationError(f"value vector must have length {ds.policy_count}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("value vector must be finite")
    return _solve(_value_problem(ds), v, start)


def log_el_value(ds: LoggedDataset, v) -> float:
    """Log empirical likelihood of the joint policy value ``v`` (constant dropped)."""
    return solve_value_dual(ds, v).loglik


def solve_diff_dual(ds: LoggedDataset, d: float, start=None) -> DualSolution:
    if not math.isfinite(d):
        raise ValidationError("difference must be finite")
    return _solve(_diff_problem(ds), [float(d)], start)


def log_el_diff(ds: LoggedDataset, d: float) -> float:
    """Log empirical likelihood of ``v_new - v_baseline = d`` for a two-policy dataset."""
    return solve_diff_dual(ds, d).loglik


def _grid(prob: _DualProblem, points: np.ndarray, strip_len: int, stop_above: float, workers: int = 1) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    G = points.shape[0]
    strip_len = max(1, int(strip_len))
    shifts = np.zeros((G, prob.A0.shape[1]))
    shifts[:, prob.shift_cols] = points
    vals = np.empty(G)
    status = np.empty(G, dtype=np.int64)

    def run(lo, hi):
        v, st, _ = _solver.sweep(
            prob.A0, prob.cnt, prob.C0, shifts[lo:hi], strip_len, TOL_GRAD, MAX_ITER, stop_above
        )
        vals[lo:hi] = v
        status[lo:hi] = st

    # chunks hold whole strips; every strip starts cold, so the split is invisible
    n_strips = -(-G // strip_len)
    workers = max(1, min(int(workers), n_strips))
    if workers == 1:
        run(0, G)
    else:
        per = -(-n_strips // (4 * workers))
        bounds = [(i * strip_len, min(G, (i + per) * strip_len)) for i in range(0, n_strips, per)]
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda b: run(*b), bounds))
    out = -vals
    out[(status == _solver.DIVERGED) | (status == _solver.TRUNCATED)] = NEG_INFINITY
    for idx in np.flatnonzero((status == _solver.MAX_ITER) | (status == _solver.FAILED)):
        sol = _solve(prob, points[idx], None, max_iter=4 * MAX_ITER)
        out[idx] = sol.loglik
    return out


def log_el_value_grid(
    ds: LoggedDataset, points, strip_len: int | None = None, floor: float | None = None, workers: int = 1
) -> np.ndarray:
    """Evaluate :func:`log_el_value` at each row of ``points``.

    Consecutive points warm-start each other within strips of ``strip_len``.
    Points whose log-EL is provably below ``floor`` are reported as ``-inf``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != ds.policy_count:
        points = points.reshape(-1, ds.policy_count)
    strip = points.shape[0] if strip_len is None else strip_len
    stop = np.inf if floor is None else -floor
    return _grid(_value_problem(ds), points, strip, stop, workers)


def log_el_diff_grid(
    ds: LoggedDataset, d_points, strip_len: int | None = None, floor: float | None = None, workers: int = 1
) -> np.ndarray:
    pts = np.asarray(d_points, dtype=float).reshape(-1, 1)
    strip = pts.shape[0] if strip_len is None else strip_len
    stop = np.inf if floor is None else -floor
    return _grid(_diff_problem(ds), pts, strip, stop, workers)


# ---------------------------------------------------------------------------
# maximum empirical likelihood


@dataclass(frozen=True)
class MeleResult:
    beta_star: np.ndarray
    data_masses: np.ndarray
    residual_mass: float
    value_box: np.ndarray  # shape (ell, 2): [lo_j, hi_j]
    max_loglik: float
    dual_value: float
    boundary_vertices: np.ndarray = field(repr=False)
    boundary_masses: np.ndarray = field(repr=False)

    @property
    def unique(self) -> bool:
        return self.residual_mass <= TOL_MASS

    @property
    def point(self) -> np.ndarray:
        """Midpoint of the value box (the estimate itself when unique)."""
        return self.value_box.mean(axis=1)


def _kkt_residual(A, cnt, C, beta, lam, act):
    g = 1.0 + A @ beta
    if np.any(g <= 0.0):
        return np.inf, None, None
    grad = A.T @ (cnt / g)
    hess = -(A * (cnt / g**2)[:, None]).T @ A
    r = np.concatenate([grad + C[act].T @ lam, 1.0 + C[act] @ beta])
    return float(np.abs(r).max()), r, hess


def _polish_mele(A, cnt, C, beta, lam, rounds=8):
    """Newton steps on the KKT system of the active vertex rows.

    The barrier leaves active rows at h ~ mu / lambda; pinning them to zero
    recovers masses accurate to rounding, which the boundary allocation needs.
    The barrier point is kept whenever polishing does not help.
    """
    h = 1.0 + C @ beta
    act = np.flatnonzero(h < 1e-6)
    if act.size == 0:
        return beta
    lam_a = lam[act].copy()
    best, r, hess = _kkt_residual(A, cnt, C, beta, lam_a, act)
    b, la = beta.copy(), lam_a
    for _ in range(rounds):
        if r is None or best <= 1e-15:
            break
        Ca = C[act]
        K = np.block([[hess, Ca.T], [Ca, np.zeros((act.size, act.size))]])
        step = np.linalg.lstsq(K, -r, rcond=None)[0]
        nb, nl = b + step[:b.size], la + step[b.size:]
        res, nr, nh = _kkt_residual(A, cnt, C, nb, nl, act)
        if not res < best or np.any(1.0 + C @ nb < -1e-14) or np.any(nl < 0.0):
            break
        best, b, la, r, hess = res, nb, nl, nr, nh
    return b


def mele(ds: LoggedDataset) -> MeleResult:
    """Maximum empirical likelihood estimate and its (possibly non-trivial) value box."""
    cache = ds.__dict__.setdefault("_problems", {})
    if "mele" in cache:
        return cache["mele"]
    W, _, cnt = ds.atoms
    Wv = ds.support.weight_vertices
    prob = _assemble(W - 1.0, cnt, Wv - 1.0, ds.policy_count)
    A = prob.A0
    C = prob.C0
    d = A.shape[1]
    if d == 0:
        beta_red = np.zeros(0)
        val = 0.0
    else:
        beta_red, lam, val, status, _ = _solver.ipm(
            0, A, np.ones(A.shape[0]), cnt, C, np.ones(C.shape[0]), np.zeros(d), 1.0,
            np.zeros(d), 1e-1, TOL_GRAD, 4 * MAX_ITER, np.inf,
        )
        if status == _solver.MAX_ITER:
            raise MaxIterationsExceeded("MELE dual did not converge", best_value=-val)
        if status != _solver.CONVERGED:
            raise SolverFailure(f"MELE dual ended with status {status}")
        beta_red = _polish_mele(A, cnt, C, beta_red, lam)
        g_red = 1.0 + A @ beta_red
        val = float(cnt @ np.log(g_red))
    beta = np.zeros(ds.policy_count)
    beta[prob.free] = beta_red
    n = ds.n
    g = 1.0 + (ds.weights - 1.0) @ beta
    q = 1.0 / (n * g)
    eps = 1.0 - float(q.sum())
    if eps < -TOL_MASS:
        raise InconsistentBoundaryAllocation(f"data masses exceed one by {-eps:.3g}")
    lo = (ds.weights * ds.rewards[:, None]).T @ q
    h = 1.0 + (Wv - 1.0) @ beta
    active = np.abs(h) < TOL_ACTIVE
    w0 = Wv[active]
    if eps <= TOL_MASS:
        masses = np.zeros(w0.shape[0])
        hi = lo.copy()
        eps = max(eps, 0.0)
    else:
        if w0.shape[0] == 0:
            raise InconsistentBoundaryAllocation(f"residual mass {eps:.3g} but no active boundary vertex")
        target = np.concatenate([[eps], 1.0 - ds.weights.T @ q])
        system = np.vstack([np.ones(w0.shape[0]), w0.T])
        masses, resid = nnls(system, target)
        if resid > 1e-8:
            raise InconsistentBoundaryAllocation(f"boundary allocation residual {resid:.3g}")
        hi = lo + w0.T @ masses
    box = np.column_stack([lo, hi])
    result = MeleResult(
        beta_star=beta,
        data_masses=q,
        residual_mass=eps,
        value_box=box,
        max_loglik=-float(val),
        dual_value=float(val),
        boundary_vertices=w0,
        boundary_masses=masses,
    )
    cache["mele"] = result
    return result


# ---------------------------------------------------------------------------
# importance-sampling baselines


def is_estimate(ds: LoggedDataset) -> np.ndarray:
    return (ds.weights * ds.rewards[:, None]).mean(axis=0)


def snis_estimate(ds: LoggedDataset) -> np.ndarray:
    total = ds.weights.sum(axis=0)
    if np.any(total <= 0.0):
        raise ZeroWeightSum("self-normalized estimate undefined: a weight column sums to zero")
    return (ds.weights * ds.rewards[:, None]).sum(axis=0) / total


def dataset_from_samples(samples: Iterable[LoggedSample], support: BoxSupport) -> LoggedDataset:
    samples = list(samples)
    return build_dataset([s.weights for s in samples], [s.reward for s in samples], support)
