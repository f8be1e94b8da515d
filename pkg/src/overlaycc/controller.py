"""Per-node predictive rate controller.

Each relay solves one finite-horizon convex QP per sampling step.  Rates are
parameterised by their distance from an upper reference ``r_max`` and the
objective penalises that distance with a geometric discount, so the solver
hands out capacity as early and as evenly as the constraints allow.

Internally the problem is condensed: the queue states are affine in the rate
deviations and are eliminated, leaving one block of variables per circuit
coupled only by the capacity rows.  Rates are scaled by ``R = max(cap_in,
cap_out)`` and queues by ``R * dt``.  :func:`build_ocp` still produces the
uncondensed problem in physical units, which is handy for inspection and for
cross-checking :func:`solve_step`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .qp import OPTIMAL, BlockQpProblem, QpProblem, solve_block_qp


class ControllerError(RuntimeError):
    pass


# Zero rates pin variables through pairs of inequalities (r_out_max = 0, no
# upstream data, ...), which leaves the feasible set without an interior and
# the optimal multipliers unbounded.  Loosening every normalized row by this
# margin keeps the interior point iteration well posed; the physical error is
# about 1e-8 * R cells/s.
INTERIOR_MARGIN = 1e-8


@dataclass(frozen=True)
class ControllerConfig:
    n_horz: int = 10
    d: float = 1.0 / 3.0
    dt: float = 0.1
    s_max: float = 50.0
    s_hat_max: float | None = None  # defaults to s_max
    relax_penalty: float = 1e6
    tol: float = 1e-6

    def __post_init__(self):
        if self.n_horz < 1:
            raise ValueError("n_horz must be >= 1")
        if not (0 < self.d <= 1):
            raise ValueError("discount d must lie in (0, 1]")
        if self.dt <= 0 or self.s_max <= 0:
            raise ValueError("dt and s_max must be positive")
        if self.s_hat_max is not None and self.s_hat_max <= 0:
            raise ValueError("s_hat_max must be positive")

    @property
    def k(self) -> int:
        """Number of rate samples, k = 0..n_horz."""
        return self.n_horz + 1

    @property
    def shat_max(self) -> float:
        return self.s_max if self.s_hat_max is None else self.s_hat_max


@dataclass
class NeighborInputs:
    """Neighbour trajectories for the circuits of one node, shape ``(m, n_horz+1)``.

    Rows follow ``circuits``.  ``r_in_gamma`` is the successor's incoming-rate
    plan already aligned to the current horizon; it becomes the bound on the
    local outgoing rate.  ``r_hat_out_beta`` bounds the cumulative incoming
    rate.
    """

    circuits: tuple[int, ...]
    r_out_beta: np.ndarray
    s_beta: np.ndarray
    r_hat_out_beta: np.ndarray
    r_in_gamma: np.ndarray

    def __post_init__(self):
        m = len(self.circuits)
        for name in ("r_out_beta", "s_beta", "r_hat_out_beta", "r_in_gamma"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim == 1 and m == 1:
                a = a[None, :]
            if a.ndim != 2 or a.shape[0] != m:
                raise ValueError(f"{name}: expected {m} rows, got shape {a.shape}")
            setattr(self, name, a)
        lens = {getattr(self, n).shape[1] for n in
                ("r_out_beta", "s_beta", "r_hat_out_beta", "r_in_gamma")}
        if len(lens) > 1 and m:
            raise ValueError("neighbour trajectories differ in length")

    @property
    def r_out_max(self) -> np.ndarray:
        return self.r_in_gamma

    @property
    def r_in_max(self) -> np.ndarray:
        return self.r_hat_out_beta


@dataclass
class OcpSolution:
    circuits: tuple[int, ...]
    r_in: np.ndarray  # (m, K) cells/s
    r_out: np.ndarray
    r_hat_out: np.ndarray
    s: np.ndarray  # (m, K) cells, k = 0..n_horz
    s_hat: np.ndarray
    delta_s: np.ndarray
    s_tilde: np.ndarray
    objective: float
    relaxed: bool
    kkt_residual: float = 0.0
    iterations: int = 0

    def first_out(self) -> dict[int, float]:
        return {c: float(max(v, 0.0)) for c, v in zip(self.circuits, self.r_out[:, 0])}

    def first_in(self) -> dict[int, float]:
        return {c: float(max(v, 0.0)) for c, v in zip(self.circuits, self.r_in[:, 0])}


def shift_and_pad(t):
    """Drop the first sample and repeat the last one; works along the last axis."""
    a = np.asarray(t, dtype=float)
    if a.shape[-1] == 0:
        raise ValueError("cannot shift an empty trajectory")
    return np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)


def _check(s_init, inputs: NeighborInputs, cfg: ControllerConfig):
    s0 = np.asarray(s_init, dtype=float).ravel()
    m = len(inputs.circuits)
    if s0.size != m:
        raise ValueError(f"s_init has {s0.size} entries for {m} circuits")
    if np.any(s0 < 0):
        raise ValueError("s_init must be non-negative")
    if m and inputs.s_beta.shape[1] != cfg.k:
        raise ValueError(f"trajectories must have {cfg.k} samples")
    return s0


def _clean(a):
    return np.maximum(np.nan_to_num(a, nan=0.0, posinf=0.0), 0.0)


# --------------------------------------------------------------------------
# Uncondensed formulation


def build_ocp(cap_in: float, cap_out: float, s_init, inputs: NeighborInputs,
              cfg: ControllerConfig, relaxed: bool = False) -> QpProblem:
    """Full problem in physical units with the queue states as variables.

    Per circuit the variables are, in order: ``s``, ``delta_s``, ``s_hat``,
    ``dr_in``, ``dr_out``, ``dr_extra``, ``r_minus`` (each ``n_horz+1`` long)
    and, when ``relaxed``, one slack per step on each of the two queue
    upper bounds (real and virtual queue relax independently).
    """
    s0 = _check(s_init, inputs, cfg)
    m, K, N, dt = len(inputs.circuits), cfg.k, cfg.n_horz, cfg.dt
    R = max(cap_in, cap_out)
    nb = 7 * K + (2 * K if relaxed else 0)
    n = m * nb
    idx = {name: j * K for j, name in enumerate(
        ("s", "ds", "sh", "din", "dout", "dex", "minus", "sig", "sigh"))}

    def col(i, name, k):
        return i * nb + idx[name] + k

    Q = np.zeros((n, n))
    disc = cfg.d ** np.arange(K)
    for i in range(m):
        for name in ("din", "dout", "dex", "minus"):
            for k in range(K):
                Q[col(i, name, k), col(i, name, k)] = 2.0 * disc[k]
        if relaxed:
            for k in range(K):
                for name in ("sig", "sigh"):
                    Q[col(i, name, k), col(i, name, k)] = 2.0 * cfg.relax_penalty
    A, b, G, h = [], [], [], []

    def row(entries, n_=n):
        v = np.zeros(n_)
        for j, val in entries:
            v[j] += val
        return v

    rout_max = _clean(inputs.r_out_max)
    rin_max = _clean(inputs.r_in_max)
    sb, rb = _clean(inputs.s_beta), _clean(inputs.r_out_beta)
    for i in range(m):
        A += [row([(col(i, "s", 0), 1)]), row([(col(i, "ds", 0), 1)]), row([(col(i, "sh", 0), 1)])]
        b += [s0[i], 0.0, s0[i]]
        for k in range(N):
            # s+ = s + dt (r_in - r_out), r_in = R - din, r_out = R - dout
            A.append(row([(col(i, "s", k + 1), 1), (col(i, "s", k), -1),
                          (col(i, "din", k), dt), (col(i, "dout", k), -dt)]))
            b.append(0.0)
            # ds+ = ds + dt (r_in - r_out_beta)
            A.append(row([(col(i, "ds", k + 1), 1), (col(i, "ds", k), -1), (col(i, "din", k), dt)]))
            b.append(dt * (R - rb[i, k]))
            # sh+ = sh + dt (r_in - r_hat), r_hat = 2R - dout - dex - minus
            A.append(row([(col(i, "sh", k + 1), 1), (col(i, "sh", k), -1), (col(i, "din", k), dt),
                          (col(i, "dout", k), -dt), (col(i, "dex", k), -dt), (col(i, "minus", k), -dt)]))
            b.append(-dt * R)
        cum = 0.0
        for k in range(K):
            sig = [(col(i, "sig", k), -1)] if relaxed else []
            sigh = [(col(i, "sigh", k), -1)] if relaxed else []
            G.append(row([(col(i, "s", k), 1)] + sig)); h.append(cfg.s_max)
            G.append(row([(col(i, "s", k), -1)])); h.append(0.0)
            # s_tilde = s_beta - ds >= 0
            G.append(row([(col(i, "ds", k), 1)])); h.append(sb[i, k])
            G.append(row([(col(i, "sh", k), 1)] + sigh)); h.append(cfg.shat_max)
            G.append(row([(col(i, "sh", k), -1)])); h.append(0.0)
            G.append(row([(col(i, "din", k), 1)])); h.append(R)  # r_in >= 0
            cum += rin_max[i, k]
            G.append(row([(col(i, "din", j), -1) for j in range(k + 1)])); h.append(cum - (k + 1) * R)
            G.append(row([(col(i, "dout", k), 1)])); h.append(R)  # r_out >= 0
            G.append(row([(col(i, "dout", k), -1)])); h.append(rout_max[i, k] - R)
            G.append(row([(col(i, "dout", k), 1), (col(i, "dex", k), 1), (col(i, "minus", k), 1)]))
            h.append(2 * R)  # r_hat >= 0
            G.append(row([(col(i, "minus", k), -1)])); h.append(0.0)
            if relaxed:
                G.append(row([(col(i, "sig", k), -1)])); h.append(0.0)
                G.append(row([(col(i, "sigh", k), -1)])); h.append(0.0)
    for k in range(K):
        G.append(row([(col(i, "din", k), -1) for i in range(m)])); h.append(cap_in - m * R)
        G.append(row([(col(i, "dout", k), -1) for i in range(m)])); h.append(cap_out - m * R)
        G.append(row([(col(i, nm, k), -1) for i in range(m) for nm in ("dout", "dex", "minus")]))
        h.append(cap_out - 2 * m * R)
    return QpProblem(Q=Q, c=np.zeros(n), A=np.array(A).reshape(-1, n), b=np.array(b),
                     G=np.array(G).reshape(-1, n), h=np.array(h))


# --------------------------------------------------------------------------
# Condensed block formulation


@lru_cache(maxsize=32)
def _templates(N: int, d: float, relaxed: bool, penalty: float):
    """Constraint and cost templates shared by every circuit block."""
    K = N + 1
    # P[k-1, j] = 1 for j < k, k = 1..N: strict prefix sums onto states 1..N
    P = np.zeros((N, K))
    for k in range(1, N + 1):
        P[k - 1, :k] = 1.0
    Lc = np.tril(np.ones((K, K)))
    I = np.eye(K)
    Z = np.zeros((K, K))
    ZP = np.zeros((N, K))
    ns = 2 * N if relaxed else 0
    nv = 4 * K + ns
    Sig = np.hstack([-np.eye(N), np.zeros((N, N))]) if relaxed else np.zeros((N, 0))
    Sigh = np.hstack([np.zeros((N, N)), -np.eye(N)]) if relaxed else np.zeros((N, 0))
    Zs = np.zeros((N, ns))
    ZsK = np.zeros((K, ns))
    blocks = [
        # din, dout, dex, minus, sigma
        [-P, P, ZP, ZP, Sig],        # s <= s_max
        [P, -P, ZP, ZP, Zs],         # s >= 0
        [-P, ZP, ZP, ZP, Zs],        # s_tilde >= 0
        [-P, P, P, P, Sigh],         # s_hat <= s_hat_max
        [P, -P, -P, -P, Zs],         # s_hat >= 0
        [I, Z, Z, Z, ZsK],           # r_in >= 0
        [-Lc, Z, Z, Z, ZsK],         # cumulative incoming allowance
        [Z, I, Z, Z, ZsK],           # r_out >= 0
        [Z, -I, Z, Z, ZsK],          # r_out <= r_out_max
        [Z, I, I, I, ZsK],           # r_hat >= 0
        [Z, Z, Z, -I, ZsK],          # r_minus >= 0
    ]
    G = np.vstack([np.hstack(b) for b in blocks])
    if relaxed:
        G = np.vstack([G, np.hstack([np.zeros((ns, 4 * K)), -np.eye(ns)])])
    E = np.vstack([
        np.hstack([-I, Z, Z, Z, ZsK]),
        np.hstack([Z, -I, Z, Z, ZsK]),
        np.hstack([Z, -I, -I, -I, ZsK]),
    ])
    disc = d ** np.arange(K)
    qd = np.concatenate([np.tile(2.0 * disc, 4), np.full(ns, 2.0 * penalty)])
    Q = np.diag(qd)
    for a in (P, Lc, G, E, Q):
        a.setflags(write=False)
    return P, Lc, G, E, Q, nv


@lru_cache(maxsize=32)
def _gram(N: int, relaxed: bool):
    """``G' diag(w) G`` for the template of :func:`_templates`, from suffix sums.

    For the strict prefix matrix ``P``, ``(P'WP)[i, j]`` is the sum of the
    weights of rows ``max(i, j)..N-1``; for ``Lc`` it is rows ``max(i, j)..N``.
    """
    K = N + 1
    mx = np.maximum.outer(np.arange(K), np.arange(K))
    sizes = [N, N, N, N, N, K, K, K, K, K, K] + ([N, N] if relaxed else [])
    cuts = np.cumsum([0] + sizes)
    P = np.zeros((N, K))
    for k in range(1, N + 1):
        P[k - 1, :k] = 1.0
    nv = 4 * K + (2 * N if relaxed else 0)
    ii = np.arange(K)

    def suffix(w):  # (m, L) -> (m, L + 1), last column zero
        out = np.zeros((w.shape[0], w.shape[1] + 1))
        out[:, :-1] = np.cumsum(w[:, ::-1], axis=1)[:, ::-1]
        return out

    def gram(wl):
        m = wl.shape[0]
        w = [wl[:, cuts[g]:cuts[g + 1]] for g in range(len(sizes))]
        sp_s = suffix(w[0] + w[1])[:, mx]
        sp_h = suffix(w[3] + w[4])[:, mx]
        sp_t = suffix(w[2])[:, mx]
        sl = suffix(w[6])[:, mx]
        B = np.zeros((m, nv, nv))

        def blk(a, b):
            return B[:, a * K:(a + 1) * K, b * K:(b + 1) * K]

        blk(0, 0)[:] = sp_s + sp_h + sp_t + sl
        blk(0, 0)[:, ii, ii] += w[5]
        blk(0, 1)[:] = -(sp_s + sp_h)
        blk(1, 1)[:] = sp_s + sp_h
        blk(1, 1)[:, ii, ii] += w[7] + w[8] + w[9]
        for b in (2, 3):
            blk(0, b)[:] = -sp_h
        for a in (1, 2, 3):
            for b in (1, 2, 3):
                if a == b == 1:
                    continue
                blk(a, b)[:] = sp_h
                blk(a, b)[:, ii, ii] += w[9]
        blk(3, 3)[:, ii, ii] += w[10]
        for a in range(4):
            for b in range(a):
                blk(a, b)[:] = blk(b, a).transpose(0, 2, 1)
        if relaxed:
            o, oh = 4 * K, 4 * K + N
            jj = np.arange(N)
            B[:, o + jj, o + jj] = w[0] + w[11]
            B[:, oh + jj, oh + jj] = w[3] + w[12]
            WP1 = w[0][:, :, None] * P[None]
            WP4 = w[3][:, :, None] * P[None]
            B[:, o:o + N, 0:K] = WP1
            B[:, o:o + N, K:2 * K] = -WP1
            B[:, oh:oh + N, 0:K] = WP4
            for b in (1, 2, 3):
                B[:, oh:oh + N, b * K:(b + 1) * K] = -WP4
            B[:, :4 * K, o:] = B[:, o:, :4 * K].transpose(0, 2, 1)
        return B

    return gram


def _rhs(s0n, sbn, rbn, rinn, routn, Smax, Shmax, P, Lc, N, relaxed):
    m = s0n.size
    K = N + 1
    kk = np.arange(1, N + 1, dtype=float)
    S0 = s0n[:, None]
    Prb = rbn @ P.T  # (m, N)
    parts = [
        Smax - S0 + np.zeros((m, N)),
        S0 + np.zeros((m, N)),
        sbn[:, 1:] + Prb - kk,
        Shmax - S0 + kk,
        S0 - kk,
        np.ones((m, K)),
        rinn @ Lc.T - np.arange(1, K + 1),
        np.ones((m, K)),
        routn - 1.0,
        np.full((m, K), 2.0),
        np.zeros((m, K)),
    ]
    if relaxed:
        parts.append(np.zeros((m, 2 * N)))
    return np.hstack(parts)


def _decode(X, s0n, sbn, rbn, R, dt, K, circuits, obj, relaxed, sol):
    din, dout = X[:, :K], X[:, K:2 * K]
    dex, minus = X[:, 2 * K:3 * K], X[:, 3 * K:4 * K]
    r_in, r_out = 1.0 - din, 1.0 - dout
    r_hat = 2.0 - dout - dex - minus

    def integrate(rate):
        out = np.zeros_like(rate)
        out[:, 1:] = np.cumsum(rate[:, :-1], axis=1)
        return out

    s = s0n[:, None] + integrate(r_in - r_out)
    s_hat = s0n[:, None] + integrate(r_in - r_hat)
    delta_s = integrate(r_in - rbn)
    s_tilde = sbn - delta_s
    q = R * dt
    return OcpSolution(
        circuits=circuits, r_in=R * r_in, r_out=R * r_out, r_hat_out=R * r_hat,
        s=q * s, s_hat=q * s_hat, delta_s=q * delta_s, s_tilde=q * s_tilde,
        objective=float(obj * R * R), relaxed=relaxed,
        kkt_residual=sol.kkt_residual, iterations=sol.iterations,
    )


def solve_step(cap_in: float, cap_out: float, s_init, inputs: NeighborInputs,
               cfg: ControllerConfig) -> OcpSolution:
    """Solve one sampling step; falls back to the slack-relaxed problem if needed."""
    s0 = _check(s_init, inputs, cfg)
    m, K, N, dt = len(inputs.circuits), cfg.k, cfg.n_horz, cfg.dt
    if m == 0:
        e = np.zeros((0, K))
        return OcpSolution((), e, e, e, e, e, e, e, 0.0, False)
    R = max(cap_in, cap_out)
    q = R * dt
    s0n = s0 / q
    sbn = _clean(inputs.s_beta) / q
    rbn = _clean(inputs.r_out_beta) / R
    rinn = _clean(inputs.r_in_max) / R
    routn = _clean(inputs.r_out_max) / R
    Smax, Shmax = cfg.s_max / q, cfg.shat_max / q
    f = np.concatenate([
        np.full(K, cap_in / R - m), np.full(K, cap_out / R - m), np.full(K, cap_out / R - 2 * m)
    ])

    def attempt(relaxed):
        P, Lc, G, E, Q, nv = _templates(N, cfg.d, relaxed, cfg.relax_penalty)
        h = _rhs(s0n, sbn, rbn, rinn, routn, Smax, Shmax, P, Lc, N, relaxed) + INTERIOR_MARGIN
        prob = BlockQpProblem(Q=Q, c=np.zeros((m, nv)), G=G, h=h, E=E, f=f + INTERIOR_MARGIN,
                              gram=_gram(N, relaxed))
        return solve_block_qp(prob, tol=cfg.tol, max_iter=200)

    # the unrelaxed problem is always feasible when the queues start inside their caps
    relaxed = bool(np.any(s0n > Smax * (1 + 1e-9)) or np.any(s0n > Shmax * (1 + 1e-9)))
    sol = attempt(relaxed)
    if sol.status != OPTIMAL and not relaxed:
        relaxed = True
        sol = attempt(True)
    if sol.status != OPTIMAL:
        raise ControllerError(f"controller QP failed after relaxation: {sol.status}")
    return _decode(sol.x, s0n, sbn, rbn, R, dt, K, tuple(inputs.circuits),
                   sol.objective, relaxed, sol)
