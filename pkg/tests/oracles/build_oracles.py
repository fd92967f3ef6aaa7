"""Rebuild the frozen reference values in ``frozen.json``.

Every value here is computed without importing porouslab: closed forms,
mpmath quadrature, sympy differentiation, scipy ODE integration or plain
numpy recursions. Run ``python tests/oracles/build_oracles.py`` to refresh.
"""

import json
from pathlib import Path

import mpmath as mp
import numpy as np
import sympy as sp
from scipy.integrate import solve_ivp
from scipy.linalg import solve_discrete_lyapunov

mp.mp.dps = 30
HERE = Path(__file__).parent


def e(k, L=1):
    return lambda xi: mp.sqrt(2 / mp.mpf(L)) * mp.sin(k * mp.pi * xi / L)


def dst_direct():
    # coefficients of samples of 2 e_1 - 0.5 e_4 on M = 63 nodes by explicit weighted sums
    M, n = 63, 8
    h = mp.mpf(1) / (M + 1)
    g = [2 * e(1)(j * h) - mp.mpf("0.5") * e(4)(j * h) for j in range(1, M + 1)]
    return [float(h * mp.fsum(g[j - 1] * e(k)(j * h) for j in range(1, M + 1))) for k in range(1, n + 1)]


def inverse_m3():
    return [float(mp.sqrt(2) * mp.sin(mp.pi * j / 4)) for j in (1, 2, 3)]


def phi_e1():
    return float(mp.quad(lambda xi: e(1)(xi) ** 4 / 4, [0, 1]))


def F_of_ce1(c=mp.mpf("0.7"), n=8):
    # -mu_k <Psi(c e_1), e_k>_{L2} for Psi(s) = s^3
    out = []
    for k in range(1, n + 1):
        w = mp.quad(lambda xi: (c * e(1)(xi)) ** 3 * e(k)(xi), [0, mp.mpf(1) / 3, mp.mpf(2) / 3, 1])
        out.append(float(-(k * mp.pi) ** 2 * w))
    return out


def grad_psi_sq_e1():
    # int |d/dxi Psi(e_1(xi))|^2 for Psi(s) = s^3
    f = lambda xi: 3 * e(1)(xi) ** 2 * mp.sqrt(2) * mp.pi * mp.cos(mp.pi * xi)  # noqa: E731
    return float(mp.quad(lambda xi: f(xi) ** 2, [0, 1]))


def ou_variance(alpha=1.0, n=8, dt=1e-3):
    out = []
    for k in range(1, n + 1):
        mu = (k * np.pi) ** 2
        a = 1.0 / (1.0 + dt * alpha * mu)
        v = solve_discrete_lyapunov(np.array([[a]]), np.array([[a * a * dt]]))
        out.append(float(v[0, 0]))
    return out


def scalar_density_cdf(points=(-0.6, -0.3, 0.0, 0.15, 0.4, 0.8), sigma=1):
    # one-mode drift b(c) = -mu_1 int (c e_1)^3 e_1 = -mu_1 c^3 int e_1^4
    m4 = mp.quad(lambda xi: e(1)(xi) ** 4, [0, 1])
    k = (mp.pi**2) * m4
    pdf = lambda c: mp.exp(2 * (-k * c**4 / 4) / sigma**2)  # noqa: E731
    Z = mp.quad(pdf, [-mp.inf, 0, mp.inf])
    return {"points": list(points), "cdf": [float(mp.quad(pdf, [-mp.inf, c]) / Z) for c in points],
            "drift_coefficient": float(-k)}


def ou_generator():
    # exact OU generator on a one-direction Gaussian bump, n = 3, alpha = 1, gamma = 1
    x = sp.symbols("x1:4")
    a = [sp.Rational(3, 10), sp.Rational(-2, 10), sp.Rational(1, 10)]
    c, w = sp.Rational(5, 100), sp.Rational(4, 10)
    t = sum(ai * xi for ai, xi in zip(a, x))
    phi = sp.exp(-((t - c) ** 2) / w**2)
    mu = [(k * sp.pi) ** 2 for k in (1, 2, 3)]
    point = {x[0]: sp.Rational(1, 10), x[1]: sp.Rational(-5, 100), x[2]: sp.Rational(2, 100)}
    out = {}
    for conv, sig2 in (("H", [1, 1, 1]), ("L2", [1 / m for m in mu])):
        gen = sum(-m * xi * sp.diff(phi, xi) for m, xi in zip(mu, x))
        gen += sum(s2 * sp.diff(phi, xi, 2) for s2, xi in zip(sig2, x)) / 2
        out[conv] = float(sp.N(gen.subs(point), 25))
    return {"weights": [float(v) for v in a], "center": float(c), "width": float(w),
            "x": [0.1, -0.05, 0.02], "value": out}


def scalar_ou_fk(x=0.4, alpha=1.0, t_max=6.0, dt=1e-3):
    # g(x) = int_0^T e^-t (Phi + |Delta Psi|_H^2)(X_t) dt for Psi(s) = alpha s, n = 1, sigma = 1
    mu = np.pi**2
    a = alpha * mu
    wgt = alpha / 2 + mu * alpha**2
    m2 = lambda s: x * x * mp.exp(-2 * a * s) + (1 - mp.exp(-2 * a * s)) / (2 * a)  # noqa: E731
    cont = float(mp.quad(lambda s: mp.exp(-s) * wgt * m2(s), [0, t_max]))
    # exact second moments of the implicit Euler chain, trapezoid in time
    steps = int(round(t_max / dt))
    r = 1.0 / (1.0 + dt * a)
    m = np.empty(steps + 1)
    m[0] = x * x
    for i in range(steps):
        m[i + 1] = r * r * (m[i] + dt)
    wts = np.exp(-dt * np.arange(steps + 1)) * dt
    wts[[0, -1]] *= 0.5
    return {"x": x, "alpha": alpha, "t_max": t_max, "dt": dt, "continuous": cont,
            "discrete": float(wgt * wts @ m)}


def hitting_time_linear(y0=0.5, y1=0.1, alpha=1.0):
    # w' = -a (w + y1) - rho sqrt(mu) sgn(w) for n = 1, integrated to the zero crossing
    mu = np.pi**2
    a = alpha * mu
    thr = alpha * np.sqrt(mu) * abs(y1) + abs(y0 - y1) / np.sqrt(mu)
    rho = 1.5 * thr
    ev = lambda t, w: w[0]  # noqa: E731
    ev.terminal = True
    sol = solve_ivp(lambda t, w: [-a * (w[0] + y1) - rho * np.sqrt(mu) * np.sign(w[0])], (0, 1), [y0 - y1],
                    events=ev, rtol=1e-12, atol=1e-14, method="DOP853")
    return {"y0": y0, "y1": y1, "alpha": alpha, "rho": rho, "T0": float(sol.t_events[0][0])}


def gaussian_ball(n=4, dt=1e-2, radius=0.05, draws=1_000_000, seed=20240611):
    # exact discrete-stationary law of the linear chain, sampled with an unrelated generator
    rng = np.random.default_rng(seed)
    mu = (np.arange(1, n + 1) * np.pi) ** 2
    var = 1.0 / (mu * (2 + dt * mu))
    X = rng.standard_normal((draws, n)) * np.sqrt(var)
    hits = int(np.sum(np.sum(X**2 / mu, axis=1) <= radius**2))
    return {"n": n, "dt": dt, "radius": radius, "draws": draws, "probability": hits / draws}


def main():
    frozen = {
        "dst_2e1_minus_half_e4": dst_direct(),
        "inverse_M3_e1": inverse_m3(),
        "phi_e1_power3": phi_e1(),
        "F_of_0.7e1_power3": F_of_ce1(),
        "grad_psi_sq_e1_power3": grad_psi_sq_e1(),
        "ou_discrete_variance_dt1e-3": ou_variance(),
        "scalar_density_power3": scalar_density_cdf(),
        "ou_generator_gaussian_bump": ou_generator(),
        "scalar_ou_feynman_kac": scalar_ou_fk(),
        "linear_hitting_time": hitting_time_linear(),
        "gaussian_ball_linear": gaussian_ball(),
    }
    (HERE / "frozen.json").write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
