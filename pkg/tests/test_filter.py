import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldcbf.core import AlphaFn, ControlAffineModel, Ldcbf, Polytope, make_rng
from ldcbf.filter import (
    Halfspace,
    certify_batch,
    certify_duration,
    comparison_bound_violation,
    filter_control,
    filter_halfspace,
    filtered_policy,
    ldcbf_halfspace,
    project_box_halfspace_batch,
)
from ldcbf.qp import AffineIneqSet, QpProblem, solve_qp
from ldcbf.verify import duration_suite, integrator_1d, quadratic_barrier

U1 = Polytope.box([-1.0], [1.0])
THETA = math.exp(-1.0)


def test_halfspace_example():
    hs = ldcbf_halfspace(quadratic_barrier(), integrator_1d(), np.array([0.5]))
    assert hs.a[0] == 1.0
    assert hs.c == pytest.approx(max(THETA - 0.25, 0) + 0.25, abs=1e-15)
    assert hs.c == pytest.approx(0.3679, abs=1e-4)


def test_halfspace_at_threshold_and_zero_input():
    b = quadratic_barrier()
    x = np.array([math.sqrt(b.threshold)])
    drift = ControlAffineModel(1, 1, lambda x: np.array([0.3]), lambda x: np.zeros((1, 1)))
    hs = ldcbf_halfspace(b, drift, x)
    assert hs.a[0] == 0.0
    assert hs.c == pytest.approx(b.beta * b.threshold - 2 * x[0] * 0.3, abs=1e-15)


def test_filter_clamps_to_boundary():
    rep = filter_control(quadratic_barrier(), integrator_1d(), [0.5], [1.0], U1)
    assert rep.u[0] == pytest.approx(0.3679, abs=1e-4)
    assert rep.modified and rep.slack == 0.0 and not rep.safety_void
    assert rep.width > 0


def test_filter_passes_admissible():
    rep = filter_control(quadratic_barrier(), integrator_1d(), [0.5], [-0.2], U1)
    assert not rep.modified and rep.u[0] == -0.2


def test_filter_slack_when_vacuous(caplog):
    rep = filter_halfspace(Halfspace(np.zeros(1), -0.5), np.array([0.3]), U1)
    assert rep.slack > 0 and rep.safety_void
    assert "safety guarantee void" in caplog.text
    assert rep.width == -np.inf


def test_qp_path_matches_closed_form():
    b = quadratic_barrier()
    fast = filter_control(b, integrator_1d(), [0.5], [1.0], U1)
    slow = filter_control(b, integrator_1d(), [0.5], [1.0], U1, use_qp=True)
    assert abs(fast.u[0] - slow.u[0]) <= 1e-10


@given(st.integers(0, 10_000))
def test_box_projection_matches_qp(seed):
    rng = make_rng(seed)
    a = rng.normal(size=2)
    c = float(rng.uniform(-0.3, 1.0))
    u0 = rng.uniform(-2, 2, 2)
    fast, slack = project_box_halfspace_batch(u0[None], a[None], np.array([c]), -np.ones(2), np.ones(2))
    if slack[0] > 0:
        # only possible when the box misses the half-space
        assert np.sum(-np.abs(a)) > c
        return
    ref, _ = solve_qp(QpProblem(np.eye(2), -u0, AffineIneqSet(a[None], np.array([c])), Polytope.box([-1, -1], [1, 1])))
    assert np.max(np.abs(fast[0] - ref)) <= 1e-8
    assert a @ fast[0] <= c + 1e-9


@given(st.floats(-0.99, 0.99), st.floats(-3, 3))
def test_filtered_control_admissible(x, u_nom):
    b = quadratic_barrier()
    if b.value([x]) >= b.level:
        return
    rep = filter_control(b, integrator_1d(), [x], [u_nom], U1, compute_width=False)
    hs = ldcbf_halfspace(b, integrator_1d(), np.array([x]))
    assert rep.slack == 0
    assert hs.violation(rep.u) <= 1e-7
    assert U1.contains(rep.u)


def test_certify_adversarial_worst_case():
    b = quadratic_barrier(T=2.0)
    x0 = [math.sqrt(b.threshold)]
    exit_t, viol = certify_duration(b, integrator_1d(), lambda x: np.ones(1), x0, U1, 1e-3, 2.5)
    assert exit_t is not None and exit_t >= 2.0 - 1e-3
    assert viol <= 1e-4


def test_certify_safe_forever_and_origin():
    b = quadratic_barrier(T=1.0)
    exit_t, _ = certify_duration(b, integrator_1d(), lambda x: -x, [0.5], U1, 1e-2, 3.0)
    assert exit_t is None
    exit_t, _ = certify_duration(b, integrator_1d(), lambda x: np.ones(1), [0.0], U1, 1e-3, 1.5)
    assert exit_t is None or exit_t >= 1.0


def test_batch_matches_single():
    b = quadratic_barrier(T=1.0)
    X0 = np.array([[-0.3], [0.1], [0.5]])
    cert = certify_batch(b, integrator_1d(), lambda X, k: np.ones((len(X), 1)), X0, U1, 1e-3, 1.5)
    for j, x0 in enumerate(X0):
        et, _ = certify_duration(b, integrator_1d(), lambda x: np.ones(1), x0, U1, 1e-3, 1.5)
        got = None if np.isnan(cert.exit_times[j]) else cert.exit_times[j]
        assert got == et
    assert cert.max_admissibility_violation <= 1e-7 and cert.max_slack == 0.0


def test_comparison_bound_exact_exponential():
    dt, beta = 0.01, 1.0
    t = np.arange(101) * dt
    B = 0.2 * np.exp(beta * t)
    assert comparison_bound_violation(B, 0.2, beta, dt) <= 1e-12
    assert comparison_bound_violation(B * np.exp(0.1 * t), 0.2, beta, dt) > 0


def test_filtered_policy_records():
    reps = []
    pol = filtered_policy(quadratic_barrier(), integrator_1d(), lambda x: np.ones(1), U1, reps)
    pol(np.array([0.5]))
    assert len(reps) == 1 and reps[0].modified


def test_duration_suite_small():
    runs, early, worst = duration_suite(n_starts=10, Ts=(1.0,), dt=1e-3)
    assert runs == 50 and early == 0 and worst <= 1e-4


def test_alpha_slope_changes_constraint():
    b = quadratic_barrier(alpha=0.0)
    hs = ldcbf_halfspace(b, integrator_1d(), np.array([0.1]))
    assert hs.c == pytest.approx(0.01)
    assert AlphaFn(2.0)(np.array([-1.0, 0.5])).tolist() == [0.0, 1.0]
