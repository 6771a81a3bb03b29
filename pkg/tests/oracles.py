"""Independent reference computations used to cross-check the library."""

import numpy as np


def rk4(f, y0, t, n):
    """Classical RK4 for ``y' = f(y)`` over ``[0, t]`` with ``n`` steps; returns the grid values."""
    h = t / n
    ys = [np.asarray(y0, dtype=complex if np.iscomplexobj(y0) else float)]
    y = ys[0]
    for _ in range(n):
        k1 = f(y)
        k2 = f(y + h / 2 * k1)
        k3 = f(y + h / 2 * k2)
        k4 = f(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        ys.append(y)
    return np.array(ys)


def mean_rk4(Bt, bt, x0, t, n=2000):
    Bt, bt = np.asarray(Bt, float), np.asarray(bt, float)
    return rk4(lambda m: Bt @ m + bt, np.asarray(x0, float), t, n)


def effective_bruteforce(params):
    """Atom-by-atom sums, written without the library's measure helpers."""
    d = params.d
    Bt = [[float(params.B[i][j]) for j in range(d)] for i in range(d)]
    for j in range(d):
        m = params.mu[j]
        for k in range(m.points.shape[0]):
            z, w = m.points[k], m.masses[k]
            for i in range(d):
                Bt[i][j] += max(z[i] - (1.0 if i == j else 0.0), 0.0) * w
    bt = [float(x) for x in params.beta]
    for k in range(params.nu.points.shape[0]):
        for i in range(d):
            bt[i] += params.nu.points[k][i] * params.nu.masses[k]
    return np.array(Bt), np.array(bt)


def second_moment_trapezoid(params, Bt, bt, v, lam, x0, t, n=4000):
    """``E|<v,X_t>|^2`` for deterministic ``x0`` by RK4 means and Richardson-extrapolated trapezoid."""
    v = np.asarray(v, complex)
    d = params.d
    C = np.array(
        [
            2 * abs(v[l]) ** 2 * params.c[l] + float(params.mu[l].masses @ np.abs(params.mu[l].points @ v) ** 2)
            for l in range(d)
        ]
    )
    nu2 = float(params.nu.masses @ np.abs(params.nu.points @ v) ** 2)
    a = 2 * lam.real

    def trap(n):
        means = mean_rk4(Bt, bt, x0, t, n)
        u = np.linspace(0, t, n + 1)
        f = np.exp(a * (t - u)) * (means @ C)
        g = np.exp(a * u)
        h = t / n
        return h * (f.sum() - (f[0] + f[-1]) / 2), h * (g.sum() - (g[0] + g[-1]) / 2)

    (f1, g1), (f2, g2) = trap(n), trap(2 * n)
    fi, gi = (4 * f2 - f1) / 3, (4 * g2 - g1) / 3
    # deterministic part from the scalar ODE p' = lam p + <v, bt>
    p = rk4(lambda p: lam * p + v @ bt, np.array(v @ np.asarray(x0, float), complex), t, n)[-1]
    return abs(p) ** 2 + fi + gi * nu2
