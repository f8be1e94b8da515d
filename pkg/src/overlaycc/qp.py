"""Convex quadratic programming by a primal-dual interior point method.

Two problem containers share one Mehrotra predictor-corrector loop:

* :class:`QpProblem` -- dense ``min 1/2 x'Qx + c'x  s.t.  Ax = b, Gx <= h``.
* :class:`BlockQpProblem` -- many identically structured blocks that only
  interact through a handful of coupling rows.  The per-node controller
  problem has exactly this shape (one block per circuit, capacity rows
  coupling them), and the Newton systems are solved with batched block
  inverses plus a small Schur complement instead of one large dense system.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotri

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


class QpStructureError(ValueError):
    """Raised for malformed problems (dimension mismatch, non-PSD Q)."""


@dataclass
class QpProblem:
    Q: np.ndarray
    c: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.Q.shape != (n, n):
            raise QpStructureError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.A, self.b = _rows(self.A, self.b, n, "A/b")
        self.G, self.h = _rows(self.G, self.h, n, "G/h")
        if n and np.linalg.eigvalsh(self.Q).min() < -1e-9:
            raise QpStructureError("Q is not positive semidefinite")

    @property
    def n_var(self) -> int:
        return self.c.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.Q @ x + self.c @ x)


def _rows(M, v, n, name):
    if M is None and v is None:
        return np.zeros((0, n)), np.zeros(0)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.asarray(v, dtype=float).ravel()
    if M.size == 0:
        M = M.reshape(0, n)
    if M.shape != (v.size, n):
        raise QpStructureError(f"{name}: got {M.shape} and {v.shape} for {n} variables")
    return M, v


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    objective: float
    kkt_residual: float
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class BlockQpProblem:
    """``m`` blocks of ``nv`` variables each.

    Block ``i`` minimizes ``1/2 x_i'Q x_i + c_i'x_i`` subject to
    ``G x_i <= h_i``; all blocks together satisfy ``E (sum_i x_i) <= f``.
    ``Q``, ``G`` and ``E`` are shared templates, ``c`` and ``h`` are per block.
    ``gram`` optionally computes ``G' diag(w_i) G`` for all blocks at once
    from the ``(m, r)`` weights; supply it when ``G`` has structure that
    makes this cheaper than a dense product.
    """

    Q: np.ndarray  # (nv, nv)
    c: np.ndarray  # (m, nv)
    G: np.ndarray  # (r, nv)
    h: np.ndarray  # (m, r)
    E: np.ndarray  # (q, nv)
    f: np.ndarray  # (q,)
    gram: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.c = np.atleast_2d(self.c)
        m, nv = self.c.shape
        if self.Q.shape != (nv, nv) or self.G.shape[1] != nv or self.E.shape[1] != nv:
            raise QpStructureError("block templates disagree on the number of variables")
        if self.h.shape != (m, self.G.shape[0]) or self.f.shape != (self.E.shape[0],):
            raise QpStructureError("right-hand sides do not match templates")

    @property
    def n_blocks(self) -> int:
        return self.c.shape[0]

    def to_dense(self) -> QpProblem:
        """Expand into an equivalent dense problem (used to cross-check)."""
        m, nv = self.c.shape
        Q = np.kron(np.eye(m), self.Q)
        G_loc = np.kron(np.eye(m), self.G)
        G_cpl = np.kron(np.ones((1, m)), self.E)
        return QpProblem(Q, self.c.ravel(), G=np.vstack([G_loc, G_cpl]),
                         h=np.concatenate([self.h.ravel(), self.f]))


# --------------------------------------------------------------------------
# Linear algebra back ends


class _DenseSystem:
    def __init__(self, p: QpProblem):
        self.p = p
        self.n, self.n_eq, self.n_ineq = p.n_var, p.b.size, p.h.size
        self.c, self.b, self.h = p.c, p.b, p.h

    def Qx(self, x):
        return self.p.Q @ x

    def Ax(self, x):
        return self.p.A @ x

    def ATy(self, y):
        return self.p.A.T @ y

    def Gx(self, x):
        return self.p.G @ x

    def GTz(self, z):
        return self.p.G.T @ z

    def factor(self, w):
        p, n = self.p, self.n
        H = p.Q + (p.G.T * w) @ p.G
        K = np.zeros((n + self.n_eq, n + self.n_eq))
        K[:n, :n] = H
        K[:n, n:] = p.A.T
        K[n:, :n] = p.A
        # tiny static regularization keeps rank-deficient A usable
        K[:n, :n] += 1e-12 * np.eye(n)
        K[n:, n:] -= 1e-12 * np.eye(self.n_eq)
        try:
            lu = _lu_factor(K)
        except (np.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
            return None

        def solve(rx, ry):
            sol = _lu_solve(lu, np.concatenate([rx, ry]))
            return sol[:n], sol[n:]

        return solve


def _lu_factor(K):
    from scipy.linalg import lu_factor

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return lu_factor(K, check_finite=False)


def _lu_solve(lu, rhs):
    from scipy.linalg import lu_solve

    return lu_solve(lu, rhs, check_finite=False)


def _separable_columns(Q, G, E) -> np.ndarray:
    """Columns that can be eliminated with a diagonal Schur complement.

    A column qualifies when it has no off-diagonal cost, does not enter the
    coupling rows, and no constraint row touches two qualifying columns.
    Relaxation slacks are the typical case.
    """
    nv = Q.shape[0]
    off = Q - np.diag(np.diag(Q))
    picked: list[int] = []
    used = np.zeros(G.shape[0], dtype=bool)
    for j in range(nv):
        if np.any(off[j] != 0) or np.any(E[:, j] != 0):
            continue
        rows = G[:, j] != 0
        if np.any(rows & used):
            continue
        picked.append(j)
        used |= rows
    return np.array(picked, dtype=np.int64)


def _spd_inverse(B):
    """Inverse of a stack of symmetric positive definite matrices, or None.

    LAPACK's Cholesky inverse fills the lower triangle only; a matrix that
    fails to factor falls back to a general inverse.
    """
    out = np.empty_like(B)
    for i in range(B.shape[0]):
        c, info = dpotrf(B[i], lower=1)
        if info == 0:
            out[i], info = dpotri(c, lower=1)
        if info != 0:
            try:
                out[i] = np.linalg.inv(B[i])
            except np.linalg.LinAlgError:
                return None
    low, strict = _tri_masks(B.shape[-1])
    return out * low + (out * strict).transpose(0, 2, 1)


@lru_cache(maxsize=8)
def _tri_masks(n: int):
    return np.tri(n), np.tri(n, k=-1)


class _BlockSystem:
    def __init__(self, p: BlockQpProblem):
        self.p = p
        self.m, self.nv = p.c.shape
        self.r, self.q = p.G.shape[0], p.E.shape[0]
        self.n, self.n_eq = self.m * self.nv, 0
        self.n_ineq = self.m * self.r + self.q
        self.c = p.c.ravel()
        self.b = np.zeros(0)
        self.h = np.concatenate([p.h.ravel(), p.f])
        T = _separable_columns(p.Q, p.G, p.E)
        H = np.setdiff1d(np.arange(self.nv), T)
        self.T, self.H = T, H
        # slices keep the gram sub-blocks as cheap views in the common layout
        # where the eliminated columns trail the rest
        contiguous = np.array_equal(H, np.arange(H.size)) and np.array_equal(T, np.arange(H.size, self.nv))
        self._hs = slice(0, H.size) if contiguous else H
        self._ts = slice(H.size, self.nv) if contiguous else T
        self.Gh, self.Gt = p.G[:, H], p.G[:, T]
        self.Gt2 = self.Gt ** 2
        self.Qhh = p.Q[np.ix_(H, H)]
        self.Qtt = np.diag(p.Q)[T]
        self.Eh = p.E[:, H]

    def _X(self, x):
        return x.reshape(self.m, self.nv)

    def Qx(self, x):
        return (self._X(x) @ self.p.Q).ravel()

    def Ax(self, x):
        return np.zeros(0)

    def ATy(self, y):
        return np.zeros(self.n)

    def Gx(self, x):
        X = self._X(x)
        loc = X @ self.p.G.T
        cpl = self.p.E @ X.sum(axis=0)
        return np.concatenate([loc.ravel(), cpl])

    def GTz(self, z):
        Zl = z[: self.m * self.r].reshape(self.m, self.r)
        zc = z[self.m * self.r:]
        return (Zl @ self.p.G + (zc @ self.p.E)[None, :]).ravel()

    def factor(self, w):
        m, nv, H, T = self.m, self.nv, self.H, self.T
        nh = H.size
        wl = w[: m * self.r].reshape(m, self.r)
        wc = w[m * self.r:]
        if self.p.gram is not None:
            full = self.p.gram(wl)
            hs, ts = self._hs, self._ts
            B = full[:, hs, :][:, :, hs]
            if T.size:
                Bth = np.ascontiguousarray(full[:, ts, :][:, :, hs])  # (m, nt, nh)
        else:
            GW = self.Gh.T[None, :, :] * wl[:, None, :]  # (m, nh, r)
            B = GW @ self.Gh
            if T.size:
                Bth = np.ascontiguousarray((GW @ self.Gt).transpose(0, 2, 1))
        B = B + self.Qhh[None, :, :]
        if T.size:
            # eliminate the diagonal tail block
            d = wl @ self.Gt2 + self.Qtt[None, :] + 1e-12
            B -= (Bth / d[:, :, None]).transpose(0, 2, 1) @ Bth
            Bht = Bth.transpose(0, 2, 1)
        B[:, range(nh), range(nh)] += 1e-12
        Binv = _spd_inverse(B)
        if Binv is None:
            return None
        # Woodbury with U = E' repeated per block, scaled by sqrt(wc)
        Eh = self.Eh
        sw = np.sqrt(wc)
        BinvEt = Binv @ Eh.T  # (m, nh, q)
        S = Eh @ BinvEt.sum(axis=0)  # (q, q)
        core = np.eye(self.q) + sw[:, None] * S * sw[None, :]
        try:
            core_inv = np.linalg.inv(core)
        except np.linalg.LinAlgError:
            return None

        def solve(rx, ry):
            R = rx.reshape(m, nv)
            Rh = R[:, H]
            if T.size:
                Rt = R[:, T]
                Rh = Rh - np.einsum("mht,mt->mh", Bht, Rt / d)
            y0 = np.einsum("mij,mj->mi", Binv, Rh)
            t = Eh @ y0.sum(axis=0)
            corr = sw * (core_inv @ (sw * t))
            Xh = y0 - np.einsum("miq,q->mi", BinvEt, corr)
            if not T.size:
                return Xh.ravel(), np.zeros(0)
            X = np.empty((m, nv))
            X[:, H] = Xh
            X[:, T] = (Rt - np.einsum("mht,mh->mt", Bht, Xh)) / d
            return X.ravel(), np.zeros(0)

        return solve


# --------------------------------------------------------------------------
# Interior point loop


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _kkt_parts(sys_, x, y, z):
    rd = sys_.Qx(x) + sys_.c + sys_.ATy(y) + sys_.GTz(z)
    rp = sys_.Ax(x) - sys_.b
    slack = sys_.h - sys_.Gx(x)
    pinf = max(np.abs(rp).max(initial=0.0), (-slack).max(initial=0.0))
    comp = np.abs(z * slack).max(initial=0.0)
    return np.abs(rd).max(initial=0.0), pinf, comp


def _ipm(sys_, tol: float, max_iter: int):
    n, p, m = sys_.n, sys_.n_eq, sys_.n_ineq
    x = np.zeros(n)
    y = np.zeros(p)
    z = np.ones(m)
    s = np.ones(m)
    # least-squares-ish starting point
    solve = sys_.factor(np.ones(m))
    if solve is not None:
        x, y = solve(-sys_.c + sys_.GTz(sys_.h), sys_.b)
        s = sys_.h - sys_.Gx(x)
        s = np.where(s < 1.0, 1.0, s) if m else s
    status = MAX_ITER
    it = 0
    best = (np.inf, x, y, z)
    for it in range(1, max_iter + 1):
        rd = sys_.Qx(x) + sys_.c + sys_.ATy(y) + sys_.GTz(z)
        rp = sys_.Ax(x) - sys_.b
        rg = sys_.Gx(x) + s - sys_.h
        mu = float(s @ z) / m if m else 0.0
        res = max(_kkt_parts(sys_, x, y, z))
        if res < best[0]:
            best = (res, x, y, z)
        if res <= tol and np.abs(rg).max(initial=0.0) <= tol:
            status = OPTIMAL
            break
        if m and np.abs(z).max() > 1e14:
            status = INFEASIBLE
            break
        w = np.minimum(z / s, 1e20)
        solve = sys_.factor(w)
        if solve is None:
            break

        def direction(rc):
            rhs_x = -rd - sys_.GTz((rc + z * rg) / s)
            dx, dy = _refined(sys_, solve, w, rhs_x, -rp)
            dz = w * sys_.Gx(dx) + (rc + z * rg) / s
            ds = -rg - sys_.Gx(dx)
            return dx, dy, dz, ds

        dx, dy, dz, ds = direction(-s * z)
        if not np.all(np.isfinite(dx)):
            break
        if m:
            a_aff = min(_max_step(s, ds), _max_step(z, dz))
            mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, dy, dz, ds = direction(-s * z - ds * dz + sigma * mu)
            if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))):
                break
            alpha = 0.99 * min(_max_step(s, ds), _max_step(z, dz))
            alpha = min(alpha, 1.0)
        else:
            alpha = 1.0
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        if m:
            z = np.maximum(z, 1e-300)
            s = np.maximum(s, 1e-300)
    if status != OPTIMAL:
        res, x, y, z = best
        if res <= tol:
            status = OPTIMAL
        elif m:
            # a diverging multiplier with persistent primal residual signals infeasibility
            _, pres, _ = _kkt_parts(sys_, x, y, z)
            if pres > tol and np.abs(z).max() > 1e8:
                status = INFEASIBLE
    return x, y, z, status, it


def _refined(sys_, solve, w, rx, ry, rounds=8):
    """Solve the reduced Newton system with iterative refinement.

    Late iterations have weights spanning 20+ orders of magnitude and the
    factorisation alone can lose every digit; refinement continues while it
    keeps shrinking the residual.
    """
    dx, dy = solve(rx, ry)
    scale = 1.0 + max(np.abs(rx).max(initial=0.0), np.abs(ry).max(initial=0.0))
    prev, best = np.inf, (dx, dy)
    for _ in range(rounds + 1):
        ex = rx - (sys_.Qx(dx) + sys_.GTz(w * sys_.Gx(dx)) + sys_.ATy(dy))
        ey = ry - sys_.Ax(dx)
        err = max(np.abs(ex).max(initial=0.0), np.abs(ey).max(initial=0.0))
        if err < prev:
            best = (dx, dy)
        if err < 1e-13 * scale or err > 0.5 * prev:
            break
        prev = err
        cx, cy = solve(ex, ey)
        dx, dy = dx + cx, dy + cy
    return best


def _finish(sys_, x, y, z, status, it, objective):
    dres, pres, comp = _kkt_parts(sys_, x, y, z)
    res = max(dres, pres, comp)
    return QpSolution(x=x, y=y, z=z, status=status, objective=objective,
                      kkt_residual=float(res), iterations=it)


def solve_qp(p: QpProblem, tol: float = 1e-6, max_iter: int = 200) -> QpSolution:
    """Solve a dense convex QP.

    ``status == "optimal"`` guarantees primal feasibility, stationarity and
    complementarity residuals (infinity norm) all within ``tol``.  Optimal
    points are then refined by :func:`polish`.
    """
    sys_ = _DenseSystem(p)
    x, y, z, status, it = _ipm(sys_, tol, max_iter)
    sol = _finish(sys_, x, y, z, status, it, p.objective(x))
    return polish(p, sol) if sol.ok and p.G.shape[0] else sol


def polish(p: QpProblem, sol: QpSolution) -> QpSolution:
    """Active-set refinement of an interior-point solution.

    Constraints whose slack is below their multiplier are treated as
    equalities and the resulting KKT system is solved directly. Helps on
    degenerate problems, where the interior iterates approach a weakly active
    bound only at the square root of the barrier parameter. The polished point
    is returned only if its KKT residual is no worse.
    """
    n = p.n_var
    slack = p.h - p.G @ sol.x
    act = np.flatnonzero(slack < sol.z)
    C = np.vstack([p.A, p.G[act]])
    d = np.concatenate([p.b, p.h[act]])
    k = C.shape[0]
    K = np.block([[p.Q, C.T], [C, np.zeros((k, k))]])
    w = np.linalg.lstsq(K, np.concatenate([-p.c, d]), rcond=None)[0]
    x, y = w[:n], w[n:n + p.A.shape[0]]
    z = np.zeros(p.G.shape[0])
    z[act] = w[n + p.A.shape[0]:]

    def resid(x, y, z):
        st = p.Q @ x + p.c + p.A.T @ y + p.G.T @ z
        sl = p.h - p.G @ x
        return max(np.abs(st).max(initial=0.0), np.abs(p.A @ x - p.b).max(initial=0.0),
                   (-sl).max(initial=0.0), np.abs(z * sl).max(initial=0.0), (-z).max(initial=0.0))

    before = resid(sol.x, sol.y, sol.z)
    after = resid(x, y, z)
    if not np.all(np.isfinite(w)) or after > before:
        return sol
    return QpSolution(x=x, y=y, z=z, status=sol.status, objective=p.objective(x),
                      kkt_residual=float(after), iterations=sol.iterations)


def solve_block_qp(p: BlockQpProblem, tol: float = 1e-6, max_iter: int = 200) -> QpSolution:
    """Solve a :class:`BlockQpProblem`; ``x`` is returned as an ``(m, nv)`` array."""
    sys_ = _BlockSystem(p)
    x, y, z, status, it = _ipm(sys_, tol, max_iter)
    X = x.reshape(p.c.shape)
    obj = float(0.5 * np.einsum("mi,ij,mj->", X, p.Q, X) + np.sum(p.c * X))
    sol = _finish(sys_, x, y, z, status, it, obj)
    sol.x = X
    return sol
