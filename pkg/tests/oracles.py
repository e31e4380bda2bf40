"""Independent reference solvers used only by the test suite.

The primal oracles place probability mass on the observed rows plus every
corner of the box support and hand the resulting convex program to cvxpy.
The dual oracle is a plain grid search with nested refinement. None of them
share code with the package under test.
"""
from __future__ import annotations

import itertools

import cvxpy as cp
import numpy as np


def _corners(bounds):
    axes = [sorted({float(lo), float(hi)}) for lo, hi in bounds]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _points(W, r, bounds):
    """Data rows followed by every (weight corner, reward in {0,1}) pair."""
    Wc = _corners(bounds)
    Wv = np.repeat(Wc, 2, axis=0)
    rv = np.tile([0.0, 1.0], Wc.shape[0])
    return np.vstack([W, Wv]), np.concatenate([r, rv])


# tight conic tolerances: the MELE box reads values off the data masses,
# whose error is roughly the square root of the objective error
_TIGHT = dict(tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, max_iter=400)


def _solve_primal(n, constraints, q):
    prob = cp.Problem(cp.Maximize(cp.sum(cp.log(q[:n]))), constraints)
    try:
        prob.solve(solver=cp.CLARABEL, **_TIGHT)
    except cp.SolverError:
        return float("nan")
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        return float("-inf")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return float("nan")
    # drop the -n log n that the package's convention removes
    return float(prob.value) + n * np.log(n)


def primal_value(W, r, bounds, v):
    """Log-EL of the value vector ``v`` on the finite support."""
    W = np.asarray(W, float).reshape(len(r), -1)
    r = np.asarray(r, float)
    X, R = _points(W, r, bounds)
    q = cp.Variable(X.shape[0])
    cons = [q >= 0, cp.sum(q) == 1, X.T @ q == 1, (X * R[:, None]).T @ q == np.atleast_1d(v)]
    return _solve_primal(W.shape[0], cons, q)


def primal_diff(W, r, bounds, d):
    W = np.asarray(W, float).reshape(len(r), -1)
    r = np.asarray(r, float)
    X, R = _points(W, r, bounds)
    u = (X[:, 1] - X[:, 0]) * R
    q = cp.Variable(X.shape[0])
    cons = [q >= 0, cp.sum(q) == 1, X.T @ q == 1, u @ q == d]
    return _solve_primal(W.shape[0], cons, q)


def primal_mele(W, r, bounds, band=1e-6):
    """Maximum log-EL and the attainable range of each value coordinate.

    Data masses are unique at the optimum (strict concavity in them), so the
    range comes from linear programs over the corner masses alone. The
    moment equalities get a small ``band`` to absorb the conic solver's
    error in the fixed data masses.
    """
    W = np.asarray(W, float).reshape(len(r), -1)
    r = np.asarray(r, float)
    n, ell = W.shape
    X, R = _points(W, r, bounds)
    q = cp.Variable(X.shape[0])
    cons = [q >= 0, cp.sum(q) == 1, X.T @ q == 1]
    best = _solve_primal(n, cons, q)
    qd = np.maximum(q.value[:n], 0.0)
    Xv, Rv = X[n:], R[n:]
    box = np.empty((ell, 2))
    for j in range(ell):
        for side, sense in ((0, cp.Minimize), (1, cp.Maximize)):
            p = cp.Variable(Xv.shape[0])
            lp = cp.Problem(
                sense((Xv[:, j] * Rv) @ p),
                [
                    p >= 0,
                    cp.abs(cp.sum(p) - (1 - qd.sum())) <= band,
                    cp.abs(Xv.T @ p - (1 - W.T @ qd)) <= band,
                ],
            )
            lp.solve(solver=cp.CLARABEL)
            box[j, side] = lp.value + float((W[:, j] * r) @ qd)
    return best, qd, box


def brute_dual(W, r, bounds, v, span=60.0, points=201, rounds=40):
    """Grid search over (beta, tau) with nested refinement; ell = 1 only.

    Infeasible points (any vertex or data term <= 0) score -inf. Returns the
    log-EL, i.e. minus the best dual value found.
    """
    W = np.asarray(W, float).reshape(-1)
    r = np.asarray(r, float)
    Wc = _corners(bounds)[:, 0]
    cw = np.repeat(Wc, 2)
    cr = np.tile([0.0, 1.0], Wc.shape[0])

    def score(b, t):
        g = 1.0 + b[..., None] * (W - 1.0) + t[..., None] * (W * r - v)
        h = 1.0 + b[..., None] * (cw - 1.0) + t[..., None] * (cw * cr - v)
        ok = (g > 0).all(-1) & (h >= 0).all(-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(ok, np.log(np.where(g > 0, g, 1.0)).sum(-1), -np.inf)
        return val

    cb, ct, half = 0.0, 0.0, span
    best = 0.0
    for _ in range(rounds):
        bs = np.linspace(cb - half, cb + half, points)
        ts = np.linspace(ct - half, ct + half, points)
        B, T = np.meshgrid(bs, ts, indexing="ij")
        S = score(B, T)
        k = np.unravel_index(np.argmax(S), S.shape)
        if S[k] >= best:
            best = S[k]
            cb, ct = B[k], T[k]
        half *= 0.6
    return -best
