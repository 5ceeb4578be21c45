"""End-to-end acceptance criteria. Each test records one PASS/FAIL line,
printed together at the end of the session."""

import math
import time

import numpy as np
import pytest

from ldcbf.core import Polytope, make_rng, rk4_step
from ldcbf.envs.cartpole import cartpole_energy, cartpole_model
from ldcbf.envs.coverage import CoverageParams
from ldcbf.experiments import (
    DurationConfig,
    OuConfig,
    ToyConfig,
    TransferConfig,
    cartpole_experiment,
    coverage_batch,
    run_toy,
    stochastic_check,
    transfer_experiment,
)
from ldcbf.qp import AffineIneqSet, QpProblem, grid_search_qp, solve_qp, vertex_enumeration_lp, width_lp
from ldcbf.trainer import LdcbfLearnConfig, balance_defaults, move_defaults
from ldcbf.verify import (
    check_barrier_gradient,
    check_composite_gradient,
    check_mlp_gradient,
    check_rk4_order,
    duration_suite,
    random_spd,
)

RESULTS = []


def record(n, name, ok, detail, seconds, limit):
    within = seconds < limit
    status = "PASS" if ok and within else "FAIL"
    RESULTS.append(f"criterion {n} {name}: {status} ({detail}; {seconds:.1f} s of {limit:.0f} s)")
    print(RESULTS[-1])
    return ok and within


def test_1_duration_guarantee():
    t0 = time.perf_counter()
    runs, early, worst = duration_suite(n_starts=100, Ts=(1.0, 2.0), dt=1e-3)
    ok = runs == 1000 and early == 0 and worst <= 1e-4
    assert record(1, "limited-duration guarantee", ok,
                  f"{runs - early}/{runs} runs exit at or after T - dt, bound excess {worst:.2e}",
                  time.perf_counter() - t0, 10)


def test_2_qp_lp_oracles():
    t0 = time.perf_counter()
    rng = make_rng(2024)
    box = Polytope.box([-1, -1], [1, 1])
    worst_qp = 0.0
    for _ in range(500):
        p = QpProblem(random_spd(rng), rng.normal(size=2),
                      AffineIneqSet(rng.normal(size=(2, 2)), rng.uniform(0.1, 1.0, 2)), box)
        u, _ = solve_qp(p)
        worst_qp = max(worst_qp, float(np.max(np.abs(u - grid_search_qp(p, [-1, -1], [1, 1])))))
    worst_lp = 0.0
    ones = np.ones(2)
    for _ in range(200):
        a = rng.normal(size=2)
        c = float(rng.uniform(0.0, 2.0))
        res = width_lp(a, c, box)
        G = np.vstack([np.concatenate([a, [1.0]]), np.hstack([box.A, (box.A @ ones)[:, None]]),
                       np.hstack([box.A, np.zeros((4, 1))]), [[0, 0, 1.0]]])
        h = np.concatenate([[c], box.b, box.b, [res.omega_max]])
        _, val = vertex_enumeration_lp(np.array([0, 0, -1.0]), G, h)
        worst_lp = max(worst_lp, abs(res.width + val))
    ok = worst_qp <= 2e-3 and worst_lp <= 1e-9
    assert record(2, "QP and LP oracles", ok, f"500 QPs max |u - u_grid| {worst_qp:.2e}, width gap {worst_lp:.2e}",
                  time.perf_counter() - t0, 30)


def test_3_learned_barrier_extraction():
    t0 = time.perf_counter()
    res = run_toy(ToyConfig())
    ok = res.td_residual < 1e-4 and res.violations == 0 and res.n_verify >= 1000 and res.runs_ok >= 99
    assert record(3, "learned barrier extraction", ok,
                  f"TD residual {res.td_residual:.1e}, {res.violations} violations on {res.n_verify} points, "
                  f"{res.runs_ok}/{res.runs} runs safe", time.perf_counter() - t0, 120)


def test_4_coverage_energy():
    t0 = time.perf_counter()
    params = CoverageParams(grid=100)
    batch = coverage_batch(params, list(range(10)), n_agents=6, horizon=600.0, dt=0.1)
    lowest = min(float(r.min_energy.min()) for _, r in batch)
    ok = len(batch) == 10 and all(r.min_energy.size == 6 for _, r in batch) and lowest >= params.E_min
    assert record(4, "coverage energy", ok, f"10 seeds x 6 agents, lowest energy {lowest:.4f} vs E_min {params.E_min}",
                  time.perf_counter() - t0, 300)


def test_7_stochastic_bound():
    t0 = time.perf_counter()
    rows = stochastic_check(OuConfig())
    ok = len(rows) == 5 and all(r.bound_ok and r.supermartingale_ok for r in rows)
    detail = ", ".join(f"x0={r.x0:g} T={r.T:g}: {r.freq:.4f} <= {r.bound:.4f}+{r.halfwidth:.4f}" for r in rows)
    worst = max(r.max_rise_se for r in rows)
    assert record(7, "stochastic exit bound", ok, f"{detail}; largest rise {worst:.2f} SE",
                  time.perf_counter() - t0, 120)


def test_8_numerical_hygiene():
    t0 = time.perf_counter()
    grads = [check_barrier_gradient(), check_composite_gradient(), check_mlp_gradient()]
    rk_ok, rk_detail = check_rk4_order()
    m = cartpole_model()
    x = np.array([0.0, 0.0, 0.3, 0.0])
    e0 = cartpole_energy(x)
    drift = 0.0
    for _ in range(10_000):
        x = rk4_step(m, x, np.zeros(1), 1e-3)
        drift = max(drift, abs(cartpole_energy(x) - e0))
    ok = all(g[0] for g in grads) and rk_ok and drift <= 1e-5
    detail = f"gradients {'; '.join(g[1] for g in grads)}; RK4 {rk_detail}; energy drift {drift:.1e}"
    assert record(8, "numerical hygiene", ok, detail, time.perf_counter() - t0, 120)


@pytest.fixture(scope="module")
def cartpole():
    t0 = time.perf_counter()
    outcomes = cartpole_experiment(10, balance_defaults(), LdcbfLearnConfig(), DurationConfig())
    return outcomes, time.perf_counter() - t0


def test_5_cartpole_durations(cartpole):
    outcomes, seconds = cartpole
    o = outcomes[-1]
    detail = (f"attempts {len(outcomes)}; random slope 0.1 mean {o.random_low.mean():.2f} s, slope 3 mean "
              f"{o.random_high.mean():.2f} s, u=1 mean {o.fixed.mean():.2f} s")
    assert record(5, "cart-pole filtered durations", o.ok, detail, seconds, 600)


def test_6_transfer(cartpole):
    outcomes, pipeline_s = cartpole
    src = outcomes[-1]
    t0 = time.perf_counter()
    res = transfer_experiment(src.actor, src.learned, move_defaults(), TransferConfig(), 10)
    seconds = pipeline_s + time.perf_counter() - t0
    w, wo = res.cumulative()
    detail = (f"barrier arm ahead in {res.batches_won}/10 batches, no-barrier success at episode 15 "
              f"{res.without_final:.2f}, mean cumulative {w.mean():.2f} vs {wo.mean():.2f}")
    assert record(6, "transfer with and without barrier", res.ok, detail, seconds, 1800)
