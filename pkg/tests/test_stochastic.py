import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldcbf.core import AlphaFn, ControlAffineModel, Ldcbf, Polytope, make_rng
from ldcbf.errors import EmptyInitialSet
from ldcbf.experiments import OuConfig, ou_barrier, ou_model, stochastic_check
from ldcbf.filter import filter_control
from ldcbf.stochastic import (
    DiffusionModel,
    exit_probability_bound,
    extract_sldcbf,
    generator_apply,
    mc_exit_probability,
    simulate_sde,
    sldcbf_filter,
    sldcbf_halfspace,
    sldcbf_policy_batch,
    wilson_halfwidth,
)
from ldcbf.value_learn import extract_ldcbf
from ldcbf.verify import quadratic_barrier

U1 = Polytope.box([-1.0], [1.0])


def diffusion(eta, drift=lambda x: -np.asarray(x, float)):
    m = ControlAffineModel(1, 1, drift, lambda x: np.ones(np.shape(x) + (1,)), np.array([-2.0]), np.array([2.0]))
    return DiffusionModel(m, lambda x: np.full(np.shape(x) + (1,), eta), 1)


def test_generator_hand_value():
    got = generator_apply(quadratic_barrier(), diffusion(0.5), np.array([1.0]), np.zeros(1))
    assert got == pytest.approx(1.75, abs=1e-12)


def test_generator_zero_noise_is_negated_lie_derivative():
    b = quadratic_barrier()
    for v in (-0.7, 0.3):
        x = np.array([v])
        assert generator_apply(b, diffusion(0.0), x, np.array([0.2])) == pytest.approx(-2 * v * (-v + 0.2))


def test_generator_linear_barrier_has_no_trace_term():
    lin = Ldcbf(lambda x: float(3 * x[0] + 5), lambda x: np.array([3.0]), 1.0, 1.0, 1.0)
    x = np.array([0.4])
    assert generator_apply(lin, diffusion(2.0), x, np.zeros(1)) == pytest.approx(
        generator_apply(lin, diffusion(0.0), x, np.zeros(1)), abs=1e-6)


def test_halfspace_sign():
    # condition -G(B) <= beta B, i.e. grad B^T g u <= beta B - 1/2 tr(B_xx eta eta^T) - grad B^T f
    b = quadratic_barrier()
    hs = sldcbf_halfspace(b, diffusion(0.5), np.array([0.5]))
    assert hs.a[0] == 1.0
    assert hs.c == pytest.approx(1.0 * 0.25 - 0.5 * 2 * 0.25 + 2 * 0.5 * 0.5)


@given(st.floats(-0.9, 0.9), st.floats(-3, 3))
def test_filtered_control_is_supermartingale(x, u_nom):
    cfg = OuConfig()
    b, dm = ou_barrier(cfg), ou_model(cfg)
    xv = np.array([x])
    rep = sldcbf_filter(b, dm, xv, [u_nom], Polytope.box([-cfg.u_max], [cfg.u_max]))
    assert rep.slack == 0
    assert -generator_apply(b, dm, xv, rep.u) <= b.beta * b.value(xv) + 1e-9


def test_zero_noise_matches_deterministic_filter_with_zero_slope():
    b = quadratic_barrier(alpha=0.0)
    dm = diffusion(0.0)
    for x, u in ((0.5, 1.0), (-0.3, -1.0), (0.1, 0.0)):
        s = sldcbf_filter(b, dm, [x], [u], U1)
        d = filter_control(b, dm.drift, [x], [u], U1)
        assert np.array_equal(s.u, d.u)


def test_filter_clamp_and_passthrough():
    b = quadratic_barrier()
    dm = diffusion(0.5)
    # 1D algebra: u <= (beta x^2 - eta^2 + 2 x^2) / (2 x) at x = 0.5
    rep = sldcbf_filter(b, dm, [0.5], [1.0], U1)
    assert rep.u[0] == pytest.approx((0.25 - 0.25 + 0.5) / 1.0)
    assert not sldcbf_filter(b, dm, [0.5], [-0.1], U1).modified


def test_batched_policy_matches_single():
    cfg = OuConfig()
    b, dm = ou_barrier(cfg), ou_model(cfg)
    U = Polytope.box([-1.0], [1.0])
    pol = sldcbf_policy_batch(b, dm, lambda X: np.sign(X + 1e-12), U)
    X = np.linspace(-0.9, 0.9, 13)[:, None]
    got = pol(X)
    for x, u in zip(X, got):
        assert u[0] == pytest.approx(sldcbf_filter(b, dm, x, np.sign(x + 1e-12), U).u[0], abs=1e-12)


def test_exit_bound_examples():
    assert exit_probability_bound(0.0, 1.0, 1.0, 1.0) == 0.0
    assert exit_probability_bound(3.0, 1.0, 0.1, 5.0) == pytest.approx(0.4946, abs=1e-4)
    L, beta, T, delta = 2.0, 0.3, 4.0, 0.2
    B0 = (1 - delta) * L * math.exp(-beta * T) / beta
    assert exit_probability_bound(B0, L, beta, T) == pytest.approx(1 - delta, abs=1e-12)
    with pytest.raises(ValueError):
        exit_probability_bound(-1.0, 1.0, 1.0, 1.0)


def test_wilson_halfwidth():
    assert 0 < wilson_halfwidth(0, 10_000) < 5e-4
    assert wilson_halfwidth(50, 100) == pytest.approx(1.96 * 0.5 / math.sqrt(103.84) * math.sqrt(1), rel=1e-2)


def test_mc_deterministic_cases():
    calm = diffusion(0.0)
    res = mc_exit_probability(calm, lambda x: np.zeros(1), [0.5], lambda x: abs(x[0]) < 1, 1.0, 1e-2, 100)
    assert res.freq == 0.0
    ramp = diffusion(0.0, drift=lambda x: np.ones(np.shape(x)))
    res = mc_exit_probability(ramp, lambda x: np.zeros(1), [0.0], lambda x: x[0] < 0.5, 1.0, 1e-2, 100)
    assert res.freq == 1.0
    with pytest.raises(ValueError):
        mc_exit_probability(calm, lambda x: np.zeros(1), [0.0], lambda x: True, 1.0, 1e-2, 10)


def test_mc_batched_equals_serial():
    dm = diffusion(0.4)
    safe1 = lambda x: abs(x[0]) < 0.6
    a = mc_exit_probability(dm, lambda x: np.zeros(1), [0.3], safe1, 0.5, 1e-2, 200, seed=3)
    b = mc_exit_probability(dm, lambda X: np.zeros((len(X), 1)), [0.3], lambda X: np.abs(X[:, 0]) < 0.6, 0.5, 1e-2,
                            200, seed=3, batched=True)
    assert a.exits == b.exits


def test_simulate_sde_freezes_after_exit():
    dm = diffusion(0.0, drift=lambda x: np.ones(np.shape(x)))
    path = simulate_sde(dm, lambda x: np.zeros(1), [0.0], lambda x: x[0] < 0.1, 1.0, 0.01, make_rng(0))
    assert path.stop_time == pytest.approx(0.1, abs=0.011)
    k = int(round(path.stop_time / 0.01))
    assert np.all(path.traj.states[k:] == path.traj.states[k])


def test_ou_bound_small_sample():
    rows = stochastic_check(OuConfig(n_paths=2000, pairs=((0.2, 1.0), (0.5, 0.25))))
    for r in rows:
        assert r.bound_ok


class _Quad:
    params = np.zeros(1)

    def __init__(self, k):
        self.k = k

    def value(self, X):
        X = np.asarray(X, float)
        v = self.k * np.sum(X * X, axis=-1)
        return float(v) if X.ndim == 1 else v

    def grad(self, X):
        return 2 * self.k * np.asarray(X, float)


def test_extract_sldcbf_delta_limits():
    dm = diffusion(0.0)
    v = _Quad(1.0 / 3.0)
    safe = np.linspace(-1, 1, 41)[:, None]
    unsafe = np.array([[1.5], [-1.5]])
    pol = lambda x: np.zeros(1)
    s = extract_sldcbf(v, dm, pol, 1.0, 1.0, 0.0, safe, unsafe)
    d = extract_ldcbf(v, dm.drift, pol, 1.0, 1.0, safe, unsafe)
    assert s.threshold == pytest.approx(d.threshold, rel=1e-9)
    # delta = 1 leaves only the zeros of V_c in the initial set
    s1 = extract_sldcbf(v, dm, pol, 1.0, 1.0, 1.0, safe, unsafe, c_margin=0.0)
    assert s1.threshold == 0.0
    assert s1.n_initial == 1 and s1.in_initial_set(np.zeros(1))
    with pytest.raises(EmptyInitialSet):
        extract_sldcbf(v, dm, pol, 1.0, 1.0, 1.0, safe, unsafe)
    with pytest.raises(ValueError):
        extract_sldcbf(v, dm, pol, 1.0, 1.0, 1.5, safe, unsafe)


def test_lipschitz_spot_check():
    assert diffusion(0.5).lipschitz_spot_check(make_rng(0), 20) == pytest.approx(0.0)
