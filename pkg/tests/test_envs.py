import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldcbf.core import eval_dynamics, gradient_mismatch, make_rng, rk4_step
from ldcbf.envs.cartpole import (
    BALANCE_SCALING,
    LDCBF_SCALING,
    CartPoleParams,
    CartPoleState,
    balance_reward,
    cartpole_energy,
    cartpole_features,
    cartpole_features_jacobian,
    cartpole_model,
    ldcbf_cost,
    move_reward,
    tolerance,
)
from ldcbf.envs.coverage import (
    CoverageParams,
    CoverageWorld,
    coverage_step,
    energy_ldcbf,
    lloyd_nominal,
    locational_cost,
    polygon_area,
    random_world,
    rho,
    rho_grad,
    run_coverage,
    voronoi_cells,
)
from ldcbf.errors import ConfigError, DuplicatePoints


# -- cart-pole --------------------------------------------------------------


def test_equilibria():
    m = cartpole_model()
    assert np.all(eval_dynamics(m, np.zeros(4), [0.0]) == 0.0)
    down = eval_dynamics(m, np.array([0.0, 0.0, math.pi, 0.0]), [0.0])
    assert np.max(np.abs(down)) <= 1e-14


def test_force_accelerates_cart():
    g = cartpole_model().input_matrix(np.zeros(4))
    assert g[1, 0] > 0 and g[0, 0] == 0 and g[2, 0] == 0


def test_pole_row_singular_only_at_horizontal():
    m = cartpole_model()
    for psi in np.linspace(-math.pi, math.pi, 721):
        gp = m.input_matrix(np.array([0.0, 0.0, psi, 0.0]))[3, 0]
        if abs(math.cos(psi)) > 1e-6:
            assert gp != 0.0
    assert abs(m.input_matrix(np.array([0.0, 0.0, math.pi / 2, 0.0]))[3, 0]) <= 1e-12


def test_batched_dynamics_match_single():
    m = cartpole_model()
    X = make_rng(0).uniform(-1, 1, (7, 4))
    F, G = m.f(X), m.g(X)
    for i, x in enumerate(X):
        assert np.allclose(F[i], m.drift(x)) and np.allclose(G[i], m.input_matrix(x))


@pytest.mark.parametrize("x0", [[0.0, 0.0, 0.3, 0.0], [0.5, -1.0, 2.5, 1.5]])
def test_energy_conserved_without_force(x0):
    m = cartpole_model()
    x = np.array(x0)
    e0 = cartpole_energy(x)
    worst = 0.0
    for _ in range(10_000):
        x = rk4_step(m, x, np.zeros(1), 1e-3)
        worst = max(worst, abs(cartpole_energy(x) - e0))
    assert worst <= 1e-5


def test_features():
    assert np.all(cartpole_features(CartPoleState(0, 0, 0, 0)) == 0)
    s = CartPoleState(0.0, 1.0, 0.0, 0.0)
    assert cartpole_features(s, BALANCE_SCALING)[1] == pytest.approx(0.1)
    assert cartpole_features(s, LDCBF_SCALING)[1] == 1.0
    X = make_rng(1).normal(size=(10, 4))
    for k in range(3):
        err = gradient_mismatch(lambda x: float(cartpole_features(x)[k]),
                                lambda x: cartpole_features_jacobian(x)[0, k], X)
        assert err <= 1e-3


def test_state_validation():
    with pytest.raises(ValueError):
        CartPoleState(0.0, math.nan, 0.0, 0.0)
    with pytest.raises(ValueError):
        CartPoleParams(pole_mass=0.0)


def test_ldcbf_cost_examples():
    at = lambda c: np.array([0.0, 0.0, math.acos(c), 0.0])
    assert ldcbf_cost(at(0.1)) == 1.0
    assert ldcbf_cost(at(0.3)) == 0.1
    assert ldcbf_cost(np.array([0.0, 0.0, math.acos(0.2) - 1e-12, 0.0])) == 0.1


def test_move_reward_examples():
    assert move_reward(np.array([0.0, -1.0, 0.0, 0.0])) == 1.0
    assert move_reward(np.array([0.0, -1.0, math.pi, 0.0])) == 0.0
    r = move_reward(np.array([0.0, 0.5, 0.0, 0.0]))
    assert r == pytest.approx(math.exp(-0.5 * (1.5 * 1.9096 / 0.5) ** 2), rel=1e-12)
    assert 1e-8 < r < 1e-7


@given(st.floats(-10, 10), st.floats(0.01, 3))
def test_tolerance_range(z, margin):
    v = tolerance(z, -1.0, 1.0, margin)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (-1.0 <= z <= 1.0) or v > 0.999999


def test_balance_reward_bounds():
    assert balance_reward(np.zeros(4), 0.0) == 1.0
    assert 0 <= balance_reward(np.array([3.0, 1.0, 2.0, 5.0]), 1.0) < 1.0


# -- coverage ---------------------------------------------------------------

DOMAIN = (-1.6, 1.6, -1.0, 1.0)


def test_voronoi_two_points_bisector():
    cells = voronoi_cells([[-0.5, 0.0], [0.5, 0.0]], DOMAIN)
    assert np.max(cells[0][:, 0]) == pytest.approx(0.0) and np.min(cells[1][:, 0]) == pytest.approx(0.0)
    assert polygon_area(cells[0]) == pytest.approx(polygon_area(cells[1]))


def test_voronoi_single_agent_whole_domain():
    (cell,) = voronoi_cells([[0.3, 0.2]], DOMAIN)
    assert polygon_area(cell) == pytest.approx(3.2 * 2.0)


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_voronoi_tiles_domain(seed, n):
    rng = make_rng(seed)
    pts = np.column_stack([rng.uniform(-1.6, 1.6, n), rng.uniform(-1.0, 1.0, n)])
    cells = voronoi_cells(pts, DOMAIN)
    assert abs(sum(polygon_area(c) for c in cells) - 6.4) <= 1e-9
    # interior-disjoint: each cell's centroid is nearest to its own generator
    for i, c in enumerate(cells):
        if polygon_area(c) > 1e-9:
            z = c.mean(axis=0)
            assert np.argmin(np.linalg.norm(pts - z, axis=1)) == i


def test_voronoi_duplicates():
    with pytest.raises(DuplicatePoints):
        voronoi_cells([[0.0, 0.0], [0.0, 0.0]], DOMAIN)


def _world(E, P, stations, density=None, **kw):
    prm = CoverageParams(grid=60, **kw)
    extra = {} if density is None else {"density": density}
    return CoverageWorld(prm, np.asarray(E, float), np.asarray(P, float), np.asarray(stations, float), **extra)


def test_lloyd_uniform_square_centroid():
    uniform = lambda P: np.ones(np.shape(P)[:-1])
    w = _world([1.0], [[0.7, -0.2]], [[0.0, 0.0]], density=uniform, domain=(-1.0, 1.0, -1.0, 1.0))
    u = lloyd_nominal(w)
    assert np.allclose(w.P + u, 0.0, atol=1e-12)
    w.P = np.zeros((1, 2))
    assert np.allclose(lloyd_nominal(w), 0.0, atol=1e-12)


def test_lloyd_cost_monotone():
    w = random_world(CoverageParams(grid=80), 6, seed=3)
    costs = [locational_cost(w)]
    for _ in range(50):
        w.P = w.P + lloyd_nominal(w)
        costs.append(locational_cost(w))
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    assert costs[-1] < costs[0]


def test_energy_barrier_examples():
    prm = CoverageParams()
    st_ = np.array([[0.0, 0.8]])
    full = _world([1.0], st_, st_)
    b = energy_ldcbf(full)
    assert b.value(np.array([1.0, 0.0, 0.8])) == 0.0
    assert b.value(np.array([prm.E_min, 0.0, 0.8])) == pytest.approx(0.45) == pytest.approx(b.level)
    assert b.threshold == pytest.approx(0.45 * math.exp(-0.25)) == pytest.approx(0.35046, abs=1e-5)
    X = np.column_stack([make_rng(0).uniform(0.6, 1.0, 20), make_rng(1).uniform(-1.5, 1.5, 20),
                         make_rng(2).uniform(-0.9, 0.9, 20)])
    assert gradient_mismatch(b.value, b.gradient, X) <= 1e-4


def test_docked_agent_charges_in_place():
    st_ = [[0.0, 0.8]]
    w = _world([0.7], st_, st_)
    w = coverage_step(w, 0.1)
    assert w.docked[0]
    p = w.P.copy()
    e = w.E[0]
    w = coverage_step(w, 0.1)
    assert np.array_equal(w.P, p) and w.E[0] > e


def test_threshold_agent_moves_toward_station():
    prm = CoverageParams()
    station = np.array([0.0, 0.8])
    p = np.array([0.9, -0.5])
    E = prm.E_max + float(rho(p, station, prm)) - prm.threshold
    w = _world([E], [p], [station])
    coverage_step(w, 0.1)
    u = (w.P[0] - p) / 0.1
    grad = rho_grad(p, station, prm)
    assert prm.K_d > prm.beta * prm.threshold
    assert grad @ u <= prm.beta * prm.threshold - prm.K_d + 1e-9
    assert grad @ u < 0 and w.last_slack[0] == 0


def test_full_battery_keeps_nominal():
    prm = CoverageParams(grid=60)
    w = _world([1.0, 1.0], [[-0.5, 0.6], [0.4, -0.7]], [[-0.4, 0.8], [0.4, -0.8]])
    nominal = np.clip(lloyd_nominal(w), -prm.u_max, prm.u_max)
    p = w.P.copy()
    coverage_step(w, 0.1)
    assert np.allclose((w.P - p) / 0.1, nominal, atol=1e-12)


def test_world_validation():
    with pytest.raises(ConfigError):
        random_world(CoverageParams(), 0, seed=0)
    with pytest.raises(ConfigError):
        _world([1.0], [[0.0, 0.0]], [[5.0, 0.0]])
    with pytest.raises(ConfigError):
        random_world(CoverageParams(), 7, seed=0)


def test_random_world_starts_in_initial_set():
    prm = CoverageParams()
    w = random_world(prm, 6, seed=4)
    for i in range(6):
        assert energy_ldcbf(w, i).in_initial_set(np.concatenate([[w.E[i]], w.P[i]]))


def test_short_coverage_run_keeps_energy():
    w = random_world(CoverageParams(grid=60), 6, seed=1)
    run = run_coverage(w, 150.0, 0.1)
    assert np.all(run.min_energy >= 0.55)
    assert run.docked.any()
