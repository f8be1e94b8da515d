import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from overlaycc.controller import ControllerConfig, _gram, _templates
from overlaycc.qp import (
    INFEASIBLE, OPTIMAL, BlockQpProblem, QpProblem, QpStructureError, _separable_columns, polish,
    solve_block_qp, solve_qp,
)

from oracles import dual_projected_gradient, fista_box, kkt_equality, kkt_residuals, random_feasible_qp


def test_active_bound():
    # min x^2 s.t. x >= 1
    sol = solve_qp(QpProblem(Q=[[2.0]], c=[0.0], G=[[-1.0]], h=[-1.0]))
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_unconstrained():
    sol = solve_qp(QpProblem(Q=np.eye(4), c=np.zeros(4)))
    assert sol.ok
    assert np.abs(sol.x).max() < 1e-9


def test_equality_qp_matches_kkt_system(rng):
    for _ in range(20):
        n, p = 5, int(rng.integers(1, 4))
        B = rng.normal(size=(n, n))
        Q = B @ B.T + 0.1 * np.eye(n)
        c, A, b = rng.normal(size=n), rng.normal(size=(p, n)), rng.normal(size=p)
        sol = solve_qp(QpProblem(Q, c, A=A, b=b))
        assert sol.ok
        assert np.allclose(sol.x, kkt_equality(Q, c, A, b), atol=1e-6)


def test_non_psd_rejected():
    with pytest.raises(QpStructureError):
        QpProblem(Q=[[1.0, 0.0], [0.0, -1.0]], c=[0.0, 0.0])
    with pytest.raises(QpStructureError):
        QpProblem(Q=np.eye(2), c=[0.0, 0.0], G=np.eye(3), h=np.zeros(3))


def test_infeasible_detected():
    # x <= -1 and x >= 1
    sol = solve_qp(QpProblem(Q=[[1.0]], c=[0.0], G=[[1.0], [-1.0]], h=[-1.0, -1.0]))
    assert sol.status != OPTIMAL
    assert sol.status == INFEASIBLE


@pytest.mark.parametrize("kind", ["general", "box"])
def test_random_qps_against_projected_gradient(kind):
    rng = np.random.default_rng(7 if kind == "general" else 8)
    for _ in range(25):
        Q, c, G, h = random_feasible_qp(rng, kind)
        p = QpProblem(Q, c, G=G, h=h)
        sol = solve_qp(p)
        assert sol.ok
        assert max(kkt_residuals(p, sol)) <= 1e-6
        if kind == "general":
            ref = dual_projected_gradient(Q, c, G, h)
        else:
            n = c.size
            ref = fista_box(Q, c, -h[n:], h[:n])
        fo = p.objective(ref)
        assert abs(sol.objective - fo) <= 1e-6 * max(1.0, abs(fo))


def test_deterministic(rng):
    Q, c, G, h = random_feasible_qp(rng, "general")
    a = solve_qp(QpProblem(Q, c, G=G, h=h))
    b = solve_qp(QpProblem(Q, c, G=G, h=h))
    assert np.array_equal(a.x, b.x)


def _random_block(rng, m, nv=4, r=5, q=2, diag_tail=False):
    Q = np.diag(rng.uniform(0.5, 2.0, nv))
    G = rng.normal(size=(r, nv))
    E = np.abs(rng.normal(size=(q, nv)))
    if diag_tail:
        # last column only appears in one row and not in E: eliminable
        G[:, -1] = 0.0
        G[0, -1] = -1.0
        E[:, -1] = 0.0
    x0 = rng.uniform(-0.5, 0.5, size=(m, nv))
    h = x0 @ G.T + rng.uniform(0.1, 1.0, size=(m, r))
    f = E @ x0.sum(axis=0) + rng.uniform(0.1, 1.0, q)
    c = rng.normal(size=(m, nv))
    return BlockQpProblem(Q=Q, c=c, G=G, h=h, E=E, f=f)


@pytest.mark.parametrize("tail", [False, True])
def test_block_solver_matches_dense(rng, tail):
    for m in (1, 3, 7):
        prob = _random_block(rng, m, diag_tail=tail)
        blk = solve_block_qp(prob, tol=1e-9)
        dense = solve_qp(prob.to_dense(), tol=1e-9)
        assert blk.ok and dense.ok
        assert np.allclose(blk.x.ravel(), dense.x, atol=1e-6)
        assert blk.objective == pytest.approx(dense.objective, rel=1e-7, abs=1e-9)


def test_separable_columns_pick_slacks():
    for relaxed in (False, True):
        _, _, G, E, Q, nv = _templates(10, 1 / 3, relaxed, 1e6)
        cols = _separable_columns(Q, G, E)
        expect = np.arange(44, nv) if relaxed else np.arange(0)
        assert np.array_equal(cols, expect)


@given(st.integers(1, 6), st.booleans(), st.integers(0, 10 ** 6))
def test_structured_gram_matches_einsum(m, relaxed, seed):
    rng = np.random.default_rng(seed)
    N = 10
    G = _templates(N, 1 / 3, relaxed, 1e6)[2]
    w = rng.uniform(0, 10, size=(m, G.shape[0])) * (rng.random((m, G.shape[0])) < 0.8)
    ref = np.einsum("ri,mr,rj->mij", G, w, G)
    got = _gram(N, relaxed)(w)
    assert np.abs(got - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_gram_callback_changes_nothing(rng):
    """Same problem with and without the structured Gram product."""
    cfg = ControllerConfig()
    P, Lc, G, E, Q, nv = _templates(cfg.n_horz, cfg.d, True, cfg.relax_penalty)
    m = 4
    h = np.abs(rng.normal(size=(m, G.shape[0]))) + 0.2
    f = np.full(E.shape[0], 3.0)
    base = dict(Q=Q, c=np.zeros((m, nv)), G=G, h=h, E=E, f=f)
    a = solve_block_qp(BlockQpProblem(**base), tol=1e-9)
    b = solve_block_qp(BlockQpProblem(**base, gram=_gram(cfg.n_horz, True)), tol=1e-9)
    assert a.ok and b.ok
    assert np.allclose(a.x, b.x, atol=1e-7)


def test_polish_recovers_degenerate_vertex():
    # min (2 - x1)^2 + (2 - x2)^2 + (2 - x3)^2, x1 + x2 <= 1, x2 + x3 <= 1, x >= 0:
    # optimum (1, 0, 1) where x2 >= 0 is active with a zero multiplier
    Q = 2 * np.eye(3)
    c = np.full(3, -4.0)
    G = np.array([[1, 1, 0], [0, 1, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=float)
    h = np.array([1, 1, 0, 0, 0], dtype=float)
    p = QpProblem(Q, c, G=G, h=h)
    sol = solve_qp(p, tol=1e-8)
    assert sol.ok
    assert np.allclose(sol.x, [1, 0, 1], atol=1e-10)
    assert max(kkt_residuals(p, sol)) < 1e-10
    # polishing an exact point keeps it
    assert np.allclose(polish(p, sol).x, sol.x, atol=1e-12)
