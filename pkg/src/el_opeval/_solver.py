"""Compiled interior-point kernel for the small concave duals.

Every dual in this package has the shape

    maximize    f(theta)
    subject to  b_k + C_k . theta >= 0      (one row per support vertex)

where f is built from the affine data terms g_i = a_i + A_i . theta, either

    mode 0:  f = sum_i cnt_i * log(g_i)
    mode 1:  f = lin . theta + coef * exp(sum_i cnt_i * log(g_i) / N)

The variable dimension is at most five and there are at most eight vertex
rows, so each Newton step solves the unreduced (theta, multiplier) system by
pivoted elimination. Forming the reduced normal matrix instead loses the
directions tangent to nearly active vertex rows, which stalls divergence
detection.
"""
from __future__ import annotations

import numpy as np
from numba import njit

CONVERGED = 0
DIVERGED = 1
MAX_ITER = 2
TRUNCATED = 3
FAILED = 4

_DIV_NORM = 1e10
_DIV_VALUE = 1e12
_TOL_GAP = 1e-12
_STEP_FRACTION = 0.995
_CENTER = 10.0
_SHRINK = 0.02


@njit(cache=True, nogil=True)
def _evaluate(mode, A, a, cnt, lin, coef, theta, total, grad, hess):
    """Return f(theta) or -inf if a data term left the domain; fills grad/hess."""
    n, d = A.shape
    for p in range(d):
        grad[p] = 0.0
        for q in range(d):
            hess[p, q] = 0.0
    acc = 0.0
    for i in range(n):
        g = a[i]
        for p in range(d):
            g += A[i, p] * theta[p]
        if not g > 0.0:
            return -np.inf
        c = cnt[i]
        acc += c * np.log(g)
        u = c / g
        v = u / g
        for p in range(d):
            grad[p] += u * A[i, p]
            aip = A[i, p] * v
            for q in range(p, d):
                hess[p, q] -= aip * A[i, q]
    for p in range(d):
        for q in range(p):
            hess[p, q] = hess[q, p]
    if mode == 0:
        return acc
    # geometric-mean form; the sums above are rescaled by 1/N
    gm = coef * np.exp(acc / total)
    f = gm
    for p in range(d):
        grad[p] /= total
    for p in range(d):
        for q in range(d):
            hess[p, q] = gm * (hess[p, q] / total + grad[p] * grad[q])
    for p in range(d):
        f += lin[p] * theta[p]
        grad[p] = lin[p] + gm * grad[p]
    return f


@njit(cache=True, nogil=True)
def _lu_solve(K, rhs, out):
    """Gaussian elimination with partial pivoting on a row-equilibrated copy."""
    N = K.shape[0]
    M = K.copy()
    x = rhs.copy()
    for p in range(N):
        big = 0.0
        for q in range(N):
            big = max(big, abs(M[p, q]))
        if big > 0.0:
            for q in range(N):
                M[p, q] /= big
            x[p] /= big
    for col in range(N):
        piv = col
        best = abs(M[col, col])
        for p in range(col + 1, N):
            if abs(M[p, col]) > best:
                best = abs(M[p, col])
                piv = p
        if best < 1e-300:
            return False
        if piv != col:
            for q in range(N):
                tmp = M[col, q]
                M[col, q] = M[piv, q]
                M[piv, q] = tmp
            tmp = x[col]
            x[col] = x[piv]
            x[piv] = tmp
        for p in range(col + 1, N):
            fct = M[p, col] / M[col, col]
            if fct != 0.0:
                for q in range(col, N):
                    M[p, q] -= fct * M[col, q]
                x[p] -= fct * x[col]
    for p in range(N - 1, -1, -1):
        acc = x[p]
        for q in range(p + 1, N):
            acc -= M[p, q] * out[q]
        out[p] = acc / M[p, p]
    for p in range(N):
        if not np.isfinite(out[p]):
            return False
    return True


@njit(cache=True, nogil=True)
def _max_step(x, dx):
    alpha = np.inf
    for k in range(x.shape[0]):
        if dx[k] < 0.0:
            alpha = min(alpha, -x[k] / dx[k])
    return alpha


@njit(cache=True, nogil=True)
def _barrier(f, h, mu):
    val = f
    for k in range(h.shape[0]):
        val += mu * np.log(h[k])
    return val


@njit(cache=True, nogil=True)
def ipm(mode, A, a, cnt, C, b, lin, coef, theta0, mu0, tol_grad, max_iter, stop_above):
    """Log-barrier path following with damped Newton steps.

    For each barrier weight ``mu`` the kernel maximizes
    ``f(theta) + mu * sum_k log(b_k + C_k . theta)`` by Newton's method with
    Armijo backtracking, then shrinks ``mu``. Newton directions come from the
    unreduced system in (dtheta, dlam) with ``lam = mu / h``, which stays well
    conditioned when some vertex rows are nearly active.

    ``theta0`` must be strictly feasible. Returns
    ``(theta, lam, value, status, iterations)`` where ``lam`` are the vertex
    multipliers at the final barrier weight.
    """
    n, d = A.shape
    m = C.shape[0]
    total = 0.0
    for i in range(n):
        total += cnt[i]
    theta = theta0.copy()
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    K = np.zeros((d + m, d + m))
    rhs = np.zeros(d + m)
    sol = np.zeros(d + m)
    dth = np.zeros(d)
    trial = np.zeros(d)
    g_grad = np.zeros(d)
    g_hess = np.zeros((d, d))
    lam = np.zeros(m)
    h = b + C @ theta
    mu = mu0 if m > 0 else 0.0
    status = MAX_ITER
    f = _evaluate(mode, A, a, cnt, lin, coef, theta, total, grad, hess)
    if f == -np.inf:
        return theta, lam, f, FAILED, 0
    it = 0
    for it in range(max_iter):
        if mode == 0 and f > stop_above:
            status = TRUNCATED
            break
        tnorm = 0.0
        for p in range(d):
            tnorm = max(tnorm, abs(theta[p]))
        if tnorm > _DIV_NORM or f > _DIV_VALUE:
            status = DIVERGED
            break
        for k in range(m):
            lam[k] = mu / h[k]
        rd = grad + C.T @ lam
        rmax = 0.0
        for p in range(d):
            rmax = max(rmax, abs(rd[p]))
        tol_gap = _TOL_GAP * max(1.0, abs(f))
        final = m * mu <= tol_gap
        if final and rmax <= tol_grad:
            status = CONVERGED
            break

        # Newton step on the barrier objective:
        #   H dtheta + C^T dlam          = -(grad + C^T lam)
        #   lam_k C_k dtheta + h_k dlam_k = 0
        # complementarity rows scaled by 1/max(lam_k, h_k)
        for p in range(d):
            for q in range(d):
                K[p, q] = hess[p, q]
            for k in range(m):
                K[p, d + k] = C[k, p]
            rhs[p] = -rd[p]
        for k in range(m):
            sk = 1.0 / max(lam[k], h[k])
            for q in range(d):
                K[d + k, q] = lam[k] * C[k, q] * sk
            for q in range(m):
                K[d + k, d + q] = 0.0
            K[d + k, d + k] = h[k] * sk
            rhs[d + k] = 0.0
        if not _lu_solve(K, rhs, sol):
            status = FAILED
            break
        for p in range(d):
            dth[p] = sol[p]
        dec = 0.0
        for p in range(d):
            dec += rd[p] * dth[p]
        if not dec > 0.0:
            dec = 0.0

        phi = _barrier(f, h, mu)
        scale = max(1.0, abs(phi))
        # once centred at the final weight (or below rounding) the Armijo test
        # carries little information: a recession direction of the dual keeps
        # dec near mu forever while f changes only in its last digits. Steps
        # are then judged by the barrier gradient instead
        polish = final and (dec <= 1e-14 * scale or dec <= _CENTER * mu)
        if dec <= _CENTER * mu and not final:
            mu = max(_SHRINK * mu, 0.5 * tol_gap / m)
            continue

        dh = C @ dth
        dg = A @ dth
        g_now = a + A @ theta
        alpha = min(_max_step(h, dh), _max_step(g_now, dg))
        alpha = min(1.0, _STEP_FRACTION * alpha)
        f_new = -np.inf
        h_new = h
        accepted = False
        if polish:
            for p in range(d):
                trial[p] = theta[p] + alpha * dth[p]
            h_new = b + C @ trial
            ok = True
            for k in range(m):
                if not h_new[k] > 0.0:
                    ok = False
            if ok:
                f_new = _evaluate(mode, A, a, cnt, lin, coef, trial, total, g_grad, g_hess)
            if ok and f_new > -np.inf:
                rd_new = g_grad.copy()
                for k in range(m):
                    for p in range(d):
                        rd_new[p] += C[k, p] * mu / h_new[k]
                rnew = 0.0
                for p in range(d):
                    rnew = max(rnew, abs(rd_new[p]))
                accepted = rnew <= 0.5 * rmax
            if not accepted:
                status = CONVERGED
                break
        for _ in range(0 if polish else 60):
            for p in range(d):
                trial[p] = theta[p] + alpha * dth[p]
            h_new = b + C @ trial
            ok = True
            for k in range(m):
                if not h_new[k] > 0.0:
                    ok = False
                    break
            if ok:
                f_new = _evaluate(mode, A, a, cnt, lin, coef, trial, total, g_grad, g_hess)
                if f_new > -np.inf and _barrier(f_new, h_new, mu) >= phi + 1e-4 * alpha * dec:
                    # a step below rounding of theta is no progress
                    tscale = 1.0
                    for p in range(d):
                        tscale = max(tscale, abs(theta[p]))
                    moved = False
                    for p in range(d):
                        if abs(trial[p] - theta[p]) > 1e-14 * tscale:
                            moved = True
                    accepted = moved
                    break
            alpha *= 0.5
        if not accepted:
            # no representable ascent left at this barrier weight
            if final:
                status = CONVERGED
                break
            mu = max(_SHRINK * mu, 0.5 * tol_gap / m)
            continue
        for p in range(d):
            theta[p] = trial[p]
            grad[p] = g_grad[p]
            for q in range(d):
                hess[p, q] = g_hess[p, q]
        f = f_new
        h = h_new
    for k in range(m):
        lam[k] = mu / h[k]
    return theta, lam, f, status, it


@njit(cache=True, nogil=True)
def _feasible_start(A, a, C, b, theta, margin):
    """Shrink ``theta`` toward 0 so every data and vertex term is >= margin.

    Requires a = 1 and b = 1 (the log-sum duals), where shrinking by s maps
    each term t to 1 - s + s*t.
    """
    lo = 1.0
    gA = a + A @ theta
    hC = b + C @ theta
    for i in range(gA.shape[0]):
        lo = min(lo, gA[i])
    for k in range(hC.shape[0]):
        lo = min(lo, hC[k])
    if lo >= margin:
        return theta.copy()
    s = (1.0 - margin) / (1.0 - lo)
    return theta * s


@njit(cache=True, nogil=True)
def sweep(A0, cnt, C0, shifts, strip_len, tol_grad, max_iter, stop_above):
    """Solve the log-sum dual at every shift on a grid, warm-starting along strips.

    The data/vertex rows at grid point ``s`` are ``A0 - s`` (``s`` is zero on
    the weight-constraint columns); the first solve of every strip starts
    cold so strips are independent.
    Returns ``(values, status, iterations)``.
    """
    G = shifts.shape[0]
    n, d = A0.shape
    m = C0.shape[0]
    values = np.empty(G)
    status = np.empty(G, dtype=np.int64)
    iters = np.empty(G, dtype=np.int64)
    A = np.empty((n, d))
    C = np.empty((m, d))
    a = np.ones(n)
    b = np.ones(m)
    lin = np.zeros(d)
    theta = np.zeros(d)
    last_ok = False
    for gi in range(G):
        for i in range(n):
            for p in range(d):
                A[i, p] = A0[i, p] - shifts[gi, p]
        for k in range(m):
            for p in range(d):
                C[k, p] = C0[k, p] - shifts[gi, p]
        if gi % strip_len == 0 or not last_ok:
            start = np.zeros(d)
            mu0 = 1e-1
        else:
            start = _feasible_start(A, a, C, b, theta, 1e-3)
            mu0 = 1e-4
        th, lam, val, st, it = ipm(0, A, a, cnt, C, b, lin, 1.0, start, mu0, tol_grad, max_iter, stop_above)
        if st == FAILED and (gi % strip_len) != 0:
            th, lam, val, st, it2 = ipm(
                0, A, a, cnt, C, b, lin, 1.0, np.zeros(d), 1e-1, tol_grad, max_iter, stop_above
            )
            it += it2
        values[gi] = val
        status[gi] = st
        iters[gi] = it
        last_ok = st == CONVERGED
        if last_ok:
            theta = th.copy()
    return values, status, iters
