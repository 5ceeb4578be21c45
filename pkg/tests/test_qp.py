import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import integrator
from ldcbf.core import Ldcbf, Polytope, make_rng
from ldcbf.errors import Infeasible, Unbounded
from ldcbf.qp import (
    AffineIneqSet,
    QpProblem,
    feasible_width,
    grid_search_qp,
    kkt_residuals,
    solve_lp,
    solve_qp,
    vertex_enumeration_lp,
    width_lp,
)
from ldcbf.verify import random_spd

BOX2 = Polytope.box([-1, -1], [1, 1])


def test_qp_examples():
    u, _ = solve_qp(QpProblem(np.eye(2), -np.ones(2), AffineIneqSet([[1.0, 1.0]], [0.0]), BOX2))
    assert np.allclose(u, 0.0, atol=1e-12)
    u, act = solve_qp(QpProblem(np.eye(2), np.zeros(2)))
    assert np.all(u == 0) and act == []
    u, _ = solve_qp(QpProblem(np.eye(1), -np.ones(1), AffineIneqSet([[1.0]], [0.3679]), Polytope.box([-1], [1])))
    assert u[0] == pytest.approx(0.3679, abs=1e-12)


def test_qp_rejects_bad_hessian():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        QpProblem(-np.eye(2), np.zeros(2))


def test_qp_infeasible():
    with pytest.raises(Infeasible):
        solve_qp(QpProblem(np.eye(1), np.zeros(1), AffineIneqSet([[1.0], [-1.0]], [0.0, -1.0])))


@given(st.integers(0, 10_000))
def test_qp_kkt(seed):
    rng = make_rng(seed)
    H = random_spd(rng)
    p = QpProblem(H, rng.normal(size=2), AffineIneqSet(rng.normal(size=(2, 2)), rng.uniform(0.1, 1, 2)), BOX2)
    u, act = solve_qp(p)
    stat, viol, comp, dual = kkt_residuals(p, u, act)
    assert stat <= 1e-8 and viol <= 1e-9 and comp <= 1e-8 and dual <= 1e-8


def test_qp_matches_grid_search():
    rng = make_rng(11)
    for _ in range(10):
        H = random_spd(rng)
        p = QpProblem(H, rng.normal(size=2), AffineIneqSet(rng.normal(size=(2, 2)), rng.uniform(0.1, 1, 2)), BOX2)
        u, _ = solve_qp(p)
        assert np.max(np.abs(u - grid_search_qp(p, [-1, -1], [1, 1]))) <= 2e-3


def test_lp_examples():
    x, val = solve_lp([-1.0], AffineIneqSet([[1.0], [1.0]], [2.0, 2.5]), None)
    assert -val == 2.0 and x[0] == 2.0
    with pytest.raises(Infeasible):
        solve_lp([1.0], AffineIneqSet([[1.0], [-1.0]], [0.0, -1.0]), None)
    with pytest.raises(Unbounded):
        solve_lp([-1.0], AffineIneqSet([[-1.0]], [0.0]), None)


@given(st.integers(0, 10_000), st.integers(2, 3))
def test_lp_matches_vertex_enumeration(seed, n):
    rng = make_rng(seed)
    G = np.vstack([rng.normal(size=(4, n)), np.eye(n), -np.eye(n)])
    h = np.concatenate([rng.uniform(0.1, 2, 4), np.full(2 * n, 3.0)])
    c = rng.normal(size=n)
    _, val = solve_lp(c, AffineIneqSet(G, h), None)
    _, ref = vertex_enumeration_lp(c, G, h)
    assert abs(val - ref) <= 1e-9 * max(1.0, abs(ref))


def test_width_examples():
    U = Polytope.box([-1], [1])
    res = width_lp([2.0], 0.5, U)
    assert res.width == pytest.approx(2.0, abs=1e-12) and res.u[0] == pytest.approx(-1.0, abs=1e-12)
    assert width_lp([2.0], 1e9, U).width == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(Infeasible):
        width_lp([0.0], -0.5, U)


def test_feasible_width_from_barrier():
    # B = x^2 on the integrator; a = 2x, c = alpha(theta - B) + B
    b = Ldcbf(lambda x: float(x @ x), lambda x: 2 * x, 1.0, 1.0, 1.0)
    w = feasible_width(b, integrator(), np.array([0.5]), Polytope.box([-1], [1]))
    assert w == pytest.approx(width_lp([1.0], np.exp(-1.0), Polytope.box([-1], [1])).width)
    assert w > 0
