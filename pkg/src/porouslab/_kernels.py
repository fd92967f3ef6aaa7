"""Compiled inner loops: Thomas solver and the batched Galerkin implicit step."""

import numpy as np
from numba import njit, prange


@njit(cache=True)
def thomas(lower, diag, upper, rhs):
    """Solve a tridiagonal system.

    ``lower[i]`` multiplies ``x[i-1]`` in row ``i`` (``lower[0]`` unused),
    ``upper[i]`` multiplies ``x[i+1]`` (``upper[-1]`` unused). No pivoting;
    the matrices built here are column diagonally dominant.
    """
    n = diag.shape[0]
    cp = np.empty(n)
    dp = np.empty(n)
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / denom
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / denom
    x = np.empty(n)
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


@njit(cache=True)
def _segment(tx, s):
    lo = 0
    hi = tx.shape[0] - 2
    if s <= tx[1]:
        return 0
    if s >= tx[hi]:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tx[mid] <= s:
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True)
def _ipow(s, k):
    out = 1.0
    for _ in range(k):
        out *= s
    return out


@njit(cache=True)
def psi3(code, alpha, m, tx, ty, tslope, tcum, F0, s):
    """Return ``(Psi(s), Psi'(s), Psibar(s))``."""
    if code == 0:
        sm1 = _ipow(s, m - 1)
        return sm1 * s, m * sm1, sm1 * s * s / (m + 1)
    if code == 1:
        sm1 = _ipow(s, m - 1)
        return alpha * s + sm1 * s, alpha + m * sm1, 0.5 * alpha * s * s + sm1 * s * s / (m + 1)
    if code == 2:
        return alpha * s, alpha, 0.5 * alpha * s * s
    i = _segment(tx, s)
    d = s - tx[i]
    return ty[i] + tslope[i] * d, tslope[i], tcum[i] + ty[i] * d + 0.5 * tslope[i] * d * d - F0


@njit(cache=True)
def _energy(y, b, mu, S, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0):
    n = y.shape[0]
    M = S.shape[0]
    e = 0.0
    for k in range(n):
        e += 0.5 * (y[k] - b[k]) ** 2 / mu[k]
    acc = 0.0
    for j in range(M):
        u = 0.0
        for k in range(n):
            u += S[j, k] * y[k]
        acc += psi3(code, alpha, m, tx, ty, tslope, tcum, F0, u)[2]
    return e + dt * h * acc


@njit(cache=True)
def _gradient(y, b, mu, S, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0, work_p, work_d, g):
    """Fill ``g`` with the energy gradient and ``work_d`` with Psi'; return |residual|_H."""
    n = y.shape[0]
    M = S.shape[0]
    for j in range(M):
        u = 0.0
        for k in range(n):
            u += S[j, k] * y[k]
        p, d, _ = psi3(code, alpha, m, tx, ty, tslope, tcum, F0, u)
        work_p[j] = p
        work_d[j] = d
    r2 = 0.0
    for k in range(n):
        w = 0.0
        for j in range(M):
            w += S[j, k] * work_p[j]
        gk = (y[k] - b[k]) / mu[k] + dt * h * w
        g[k] = gk
        r2 += mu[k] * gk * gk
    return np.sqrt(r2)


@njit(cache=True)
def _resolve_one(y, b, mu, S, Ctab, inv_len, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0,
                 tol, max_iter, damping, work_u, work_p, work_d, work_g, work_H, work_y,
                 work_d2, work_g2, work_c):
    """Newton solve of ``y - dt P_n Delta Psi(y) = b`` in place; returns (iters, rel. residual).

    The equation is the optimality condition of the strictly convex
    ``1/2 |y - b|_H^2 + dt Phi(y)``. A full Newton step is kept when it lowers
    the residual; otherwise Armijo backtracking on the energy takes over.
    """
    n = y.shape[0]
    M = S.shape[0]
    bnorm = 0.0
    for k in range(n):
        bnorm += b[k] * b[k] / mu[k]
    scale = max(1.0, np.sqrt(bnorm))
    res = _gradient(y, b, mu, S, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0, work_p, work_d, work_g)
    it = 0
    while res > tol * scale and it < max_iter:
        # e_k e_l = (cos((k-l)t) - cos((k+l)t)) / L turns the Hessian into 2n+1 sums
        for q in range(2 * n + 1):
            acc = 0.0
            for j in range(M):
                acc += work_d[j] * Ctab[q, j]
            work_c[q] = acc
        for k in range(n):
            for l in range(k + 1):
                work_H[k, l] = dt * h * inv_len * (work_c[k - l] - work_c[k + l + 2])
            work_H[k, k] += 1.0 / mu[k]
        # Cholesky, lower triangle in place
        for k in range(n):
            s = work_H[k, k]
            for l in range(k):
                s -= work_H[k, l] * work_H[k, l]
            work_H[k, k] = np.sqrt(s)
            for i in range(k + 1, n):
                s = work_H[i, k]
                for l in range(k):
                    s -= work_H[i, l] * work_H[k, l]
                work_H[i, k] = s / work_H[k, k]
        for k in range(n):
            s = -work_g[k]
            for l in range(k):
                s -= work_H[k, l] * work_u[l]
            work_u[k] = s / work_H[k, k]
        for k in range(n - 1, -1, -1):
            s = work_u[k]
            for l in range(k + 1, n):
                s -= work_H[l, k] * work_u[l]
            work_u[k] = s / work_H[k, k]
        it += 1
        for k in range(n):
            work_y[k] = y[k] + work_u[k]
        res_t = _gradient(work_y, b, mu, S, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0,
                          work_p, work_d2, work_g2)
        if res_t < res:
            for k in range(n):
                y[k] = work_y[k]
                work_g[k] = work_g2[k]
            for j in range(M):
                work_d[j] = work_d2[j]
            res = res_t
            continue
        slope = 0.0
        for k in range(n):
            slope += work_g[k] * work_u[k]
        e0 = _energy(y, b, mu, S, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0)
        t = damping
        moved = False
        while t > 1e-14:
            for k in range(n):
                work_y[k] = y[k] + t * work_u[k]
            e1 = _energy(work_y, b, mu, S, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0)
            if e1 <= e0 + 1e-4 * t * slope:
                moved = True
                break
            t *= damping
        if not moved:
            break
        for k in range(n):
            y[k] = work_y[k]
        res = _gradient(y, b, mu, S, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0, work_p, work_d, work_g)
    return it, res / scale


@njit(cache=True, parallel=True)
def galerkin_advance(Y, noise, dt, mu, S, Ctab, inv_len, h, code, alpha, m, tx, ty, tslope, tcum, F0,
                     tol, max_iter, damping, out, record):
    """Advance ``P`` chains through ``noise.shape[0]`` drift-implicit steps.

    ``Ctab[q, j] = cos(q pi j / (M + 1))`` for ``q = 0..2n``.
    ``Y`` (P, n) is updated in place. ``noise[s, p]`` is the already scaled
    increment for step ``s`` of chain ``p``. When ``record`` is true,
    ``out[s, p]`` receives the state after step ``s``. Returns per-chain
    worst relative residual and total Newton iterations.
    """
    P, n = Y.shape
    steps = noise.shape[0]
    M = S.shape[0]
    worst = np.zeros(P)
    iters = np.zeros(P, dtype=np.int64)
    for p in prange(P):
        y = np.empty(n)
        b = np.empty(n)
        work_u = np.empty(n)
        work_g = np.empty(n)
        work_y = np.empty(n)
        work_H = np.empty((n, n))
        work_p = np.empty(M)
        work_d = np.empty(M)
        work_d2 = np.empty(M)
        work_g2 = np.empty(n)
        work_c = np.empty(2 * n + 1)
        for k in range(n):
            y[k] = Y[p, k]
        for s in range(steps):
            for k in range(n):
                b[k] = y[k] + noise[s, p, k]
                y[k] = b[k]
            it, res = _resolve_one(y, b, mu, S, Ctab, inv_len, h, dt, code, alpha, m, tx, ty, tslope, tcum, F0,
                                   tol, max_iter, damping, work_u, work_p, work_d, work_g, work_H, work_y,
                                   work_d2, work_g2, work_c)
            iters[p] += it
            if res > worst[p] or not np.isfinite(res):
                worst[p] = res
            if record:
                for k in range(n):
                    out[s, p, k] = y[k]
        for k in range(n):
            Y[p, k] = y[k]
    return worst, iters
