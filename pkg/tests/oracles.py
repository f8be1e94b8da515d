"""Independent reference implementations used by the tests."""
from __future__ import annotations

import numpy as np


def fista_box(Q, c, lo, hi, iters=200_000, tol=1e-13):
    """Accelerated projected gradient for min 1/2 x'Qx + c'x over a box, with restarts."""
    L = max(float(np.linalg.eigvalsh(Q).max()), 1e-12)
    x = np.clip(np.zeros_like(c), lo, hi)
    y, t = x.copy(), 1.0
    for _ in range(iters):
        xn = np.clip(y - (Q @ y + c) / L, lo, hi)
        tn = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y = xn + (t - 1) / tn * (xn - x)
        if np.abs(xn - x).max() < tol:
            return xn
        if (xn - x) @ (Q @ xn + c) > 0:
            t, y = 1.0, xn
        else:
            t = tn
        x = xn
    return x


def dual_projected_gradient(Q, c, G, h):
    """Solve min 1/2 x'Qx + c'x s.t. Gx <= h (Q positive definite) through its dual."""
    Qi = np.linalg.inv(Q)
    M = G @ Qi @ G.T
    q = G @ Qi @ c + h
    z = fista_box(M, q, np.zeros(len(h)), np.full(len(h), np.inf))
    return -Qi @ (c + G.T @ z)


def kkt_equality(Q, c, A, b):
    """Direct solution of the KKT system of an equality constrained QP."""
    n, p = Q.shape[0], A.shape[0]
    K = np.block([[Q, A.T], [A, np.zeros((p, p))]])
    sol = np.linalg.solve(K, np.concatenate([-c, b]))
    return sol[:n]


def kkt_residuals(p, sol):
    """(stationarity, primal infeasibility, complementarity, dual sign) in inf-norm."""
    x, y, z = sol.x, sol.y, sol.z
    st = p.Q @ x + p.c + p.A.T @ y + p.G.T @ z
    slack = p.h - p.G @ x
    pinf = max(np.abs(p.A @ x - p.b).max(initial=0.0), (-slack).max(initial=0.0))
    comp = np.abs(z * slack).max(initial=0.0)
    dneg = (-z).max(initial=0.0)
    return np.abs(st).max(initial=0.0), pinf, comp, dneg


def random_feasible_qp(rng, kind):
    """``kind`` "general": PD Q with random inequalities; "box": PSD (maybe singular) Q with bounds."""
    n = int(rng.integers(2, 31))
    if kind == "general":
        m = int(rng.integers(1, 41))
        U = np.linalg.qr(rng.normal(size=(n, n)))[0]
        Q = U @ np.diag(rng.uniform(0.5, 5.0, n)) @ U.T
        c = 3 * rng.normal(size=n)
        G = rng.normal(size=(m, n))
        h = G @ rng.normal(size=n) + rng.uniform(0, 1, m)
        return Q, c, G, h
    r = int(rng.integers(1, n + 1))
    B = rng.normal(size=(r, n))
    Q = B.T @ B
    c = 3 * rng.normal(size=n)
    lo, hi = -rng.uniform(0.1, 2, n), rng.uniform(0.1, 2, n)
    G = np.vstack([np.eye(n), -np.eye(n)])
    return Q, c, G, np.concatenate([hi, -lo])


def violates_maxmin(rates, paths, caps, delta=0.01):
    """True if some circuit can grow by ``delta`` (relative) while every circuit
    with a rate not above it keeps its rate; larger ones may drop to zero."""
    p = len(rates)
    for i in range(p):
        trial = [0.0 if rates[j] > rates[i] and j != i else rates[j] for j in range(p)]
        trial[i] = rates[i] * (1 + delta) + 1e-9
        if _feasible(trial, paths, caps):
            return True
    return False


def _feasible(r, paths, caps):
    load = {}
    for ri, path in zip(r, paths):
        for a in path:
            load[a] = load.get(a, 0.0) + ri
    return all(load[a] <= caps[a] * (1 + 1e-12) for a in load)
