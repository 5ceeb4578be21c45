"""Fast analytic invariant checks behind ``ldcbf verify``.

Each check returns ``(ok, detail)``. The barriers used here have closed
forms so every expected value is exact up to integration error.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .compose import min_compose
from .core import AlphaFn, ControlAffineModel, Ldcbf, Polytope, gradient_mismatch, make_rng, rk4_step
from .filter import certify_batch, filter_control, project_box_halfspace_batch
from .nn import Mlp
from .qp import AffineIneqSet, QpProblem, grid_search_qp, solve_qp, vertex_enumeration_lp, width_lp
from .stochastic import DiffusionModel, exit_probability_bound, generator_apply, wilson_halfwidth

GRAD_RTOL = 1e-3


def integrator_1d() -> ControlAffineModel:
    return ControlAffineModel(1, 1, lambda x: np.zeros_like(np.asarray(x, float)),
                              lambda x: np.ones(np.shape(x) + (1,)), np.array([-3.0]), np.array([3.0]))


def quadratic_barrier(T: float = 1.0, alpha: float = 1.0) -> Ldcbf:
    """B = x^2 with L = 1, beta = 1; works on (n,) and (N, n) inputs."""

    def B(x):
        x = np.asarray(x, dtype=float)
        return np.sum(x * x, axis=-1)

    def grad(x):
        return 2.0 * np.asarray(x, dtype=float)

    def hess(x):
        return 2.0 * np.eye(np.size(x))

    return Ldcbf(B, grad, 1.0, 1.0, T, AlphaFn(alpha), hess)


def check_barrier_gradient():
    b = quadratic_barrier()
    xs = make_rng(0).uniform(-1.5, 1.5, (20, 1))
    err = gradient_mismatch(b.value, b.gradient, xs)
    return err <= GRAD_RTOL, f"max rel err {err:.2e}"


def check_composite_gradient():
    b1 = quadratic_barrier()
    shift = Ldcbf(lambda x: np.sum((np.asarray(x) - 1.0) ** 2, axis=-1), lambda x: 2.0 * (np.asarray(x) - 1.0),
                  1.0, 1.0, 1.0)
    comp = min_compose([b1, shift])
    # stay away from the switching point x = 0.5
    xs = [np.array([v]) for v in np.linspace(-1.2, 1.8, 21) if abs(v - 0.5) > 0.05]
    err = gradient_mismatch(comp.value, comp.gradient, xs)
    ok_min = all(abs(comp.value(x) - min(b1.value(x), shift.value(x))) == 0.0 for x in xs)
    return err <= GRAD_RTOL and ok_min, f"max rel err {err:.2e}"


def check_mlp_gradient():
    rng = make_rng(1)
    worst = 0.0
    for sizes, extra in (([3, 8, 6, 1], 0), ([3, 8, 6, 1], 1)):
        net = Mlp(sizes, rng, extra_in=extra, out_scale=0.5)
        X = rng.normal(size=(1, 3))
        A = rng.normal(size=(1, extra)) if extra else None

        def f(p):
            old = net.params.copy()
            net.set_params(p)
            out = float(net.forward(X, A)[0, 0])
            net.set_params(old)
            return out

        def g(p):
            old = net.params.copy()
            net.set_params(p)
            net.forward(X, A, cache=True)
            out, _, _ = net.backward(np.ones((1, 1)))
            net.set_params(old)
            return out

        worst = max(worst, gradient_mismatch(f, g, [net.params.copy()], h=1e-6))
    return worst <= GRAD_RTOL, f"max rel err {worst:.2e}"


def random_spd(rng, n: int = 2, lo: float = 1.0, hi: float = 4.0) -> np.ndarray:
    """Eigenvalues in [lo, hi]: a grid argmin at spacing h then lies within
    h sqrt(hi / lo) of the true minimizer."""
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(rng.uniform(lo, hi, n)) @ Q.T


def check_qp_grid():
    rng = make_rng(2)
    worst = 0.0
    for _ in range(25):
        H = random_spd(rng)
        b = rng.normal(size=2)
        G = rng.normal(size=(2, 2))
        h = rng.uniform(0.1, 1.0, 2)
        p = QpProblem(H, b, AffineIneqSet(G, h), Polytope.box([-1, -1], [1, 1]))
        u, _ = solve_qp(p)
        ug = grid_search_qp(p, [-1, -1], [1, 1])
        worst = max(worst, float(np.max(np.abs(u - ug))))
    return worst <= 2e-3, f"max |u - u_grid| {worst:.2e}"


def check_width_lp():
    rng = make_rng(3)
    U = Polytope.box([-1, -1], [1, 1])
    worst = 0.0
    for _ in range(25):
        a = rng.normal(size=2)
        c = float(rng.uniform(0.0, 2.0))
        res = width_lp(a, c, U)
        n = 2
        ones = np.ones(n)
        G = np.vstack([np.concatenate([a, [1.0]]), np.hstack([U.A, (U.A @ ones)[:, None]]),
                       np.hstack([U.A, np.zeros((4, 1))]), [[0, 0, 1.0]]])
        h = np.concatenate([[c], U.b, U.b, [res.omega_max]])
        _, val = vertex_enumeration_lp(np.array([0, 0, -1.0]), G, h)
        worst = max(worst, abs(res.width + val))
    return worst <= 1e-9, f"max width gap {worst:.2e}"


def check_projection():
    rng = make_rng(4)
    worst = 0.0
    U = Polytope.box([-1, -1], [1, 1])
    for _ in range(50):
        a = rng.normal(size=2)
        c = float(rng.uniform(-0.5, 1.0))
        u0 = rng.uniform(-2, 2, 2)
        fast, _ = project_box_halfspace_batch(u0[None], a[None], np.array([c]), -np.ones(2), np.ones(2))
        try:
            ref, _ = solve_qp(QpProblem(np.eye(2), -u0, AffineIneqSet(a[None], np.array([c])), U))
        except Exception:
            continue
        worst = max(worst, float(np.max(np.abs(fast[0] - ref))))
    return worst <= 1e-8, f"max |fast - qp| {worst:.2e}"


def adversarial_policies(seed: int = 5):
    """Five nominal policies on the integrator that try to leave the safe set."""
    rng = make_rng(seed)
    flips = rng.choice([-1.0, 1.0], size=4096)

    def outward(X, k):
        return np.sign(X + 1e-12)

    def inward_then_out(X, k):  # push in for 0.2 s, then out
        return np.sign(X + 1e-12) * (1.0 if k >= 200 else -1.0)

    return [
        ("outward", outward),
        ("plus", lambda X, k: np.ones((len(X), 1))),
        ("minus", lambda X, k: -np.ones((len(X), 1))),
        ("random_sign", lambda X, k: np.full((len(X), 1), flips[k % len(flips)])),
        ("inward_then_out", inward_then_out),
    ]


def duration_suite(n_starts: int = 100, Ts=(1.0, 2.0), dt: float = 1e-3):
    """First exit times of filtered adversarial policies on the integrator
    with B = x^2, started across the initial set. Returns
    (runs, runs exiting before T - dt, worst comparison-bound excess)."""
    U = Polytope.box([-1.0], [1.0])
    runs = early = 0
    worst_bound = -math.inf
    for T in Ts:
        b = quadratic_barrier(T)
        r = math.sqrt(b.threshold)
        X0 = np.linspace(-r, r, n_starts)[:, None]
        for _, pol in adversarial_policies():
            cert = certify_batch(b, integrator_1d(), pol, X0, U, dt, T + 0.5)
            runs += len(X0)
            early += int(np.count_nonzero(cert.exit_times < T - dt))
            worst_bound = max(worst_bound, cert.max_bound_violation)
    return runs, early, worst_bound


def check_duration():
    """Filtered adversarial policies on the integrator exit no earlier than T - dt."""
    runs, early, worst = duration_suite()
    ok = early == 0 and worst <= 1e-4
    return ok, f"{runs - early}/{runs} runs exit at or after T - dt, bound excess {worst:.2e}"


def check_filter_noop():
    """Controls already inside the admissible set pass through unchanged."""
    b = quadratic_barrier()
    rep = filter_control(b, integrator_1d(), np.array([0.1]), np.array([-0.05]), Polytope.box([-1.0], [1.0]))
    ok = (not rep.modified) and rep.u[0] == -0.05
    return ok, f"u = {rep.u[0]:.3g}"


def check_generator():
    """OU drift -x with unit noise: G B = -1 + 2 x^2 for B = x^2, u = 0."""
    model = ControlAffineModel(1, 1, lambda x: -np.asarray(x, float), lambda x: np.ones((1, 1)))
    dm = DiffusionModel(model, lambda x: np.ones((1, 1)), 1)
    b = quadratic_barrier()
    worst = 0.0
    for v in np.linspace(-1, 1, 9):
        got = generator_apply(b, dm, np.array([v]), np.zeros(1))
        worst = max(worst, abs(got - (-1.0 + 2.0 * v * v)))
    return worst <= 1e-9, f"max error {worst:.2e}"


def check_exit_bound():
    ok = exit_probability_bound(0.0, 1.0, 1.0, 1.0) == 0.0 and exit_probability_bound(10.0, 1.0, 1.0, 1.0) == 1.0
    hw = wilson_halfwidth(0, 10_000)
    ok = ok and 0 < hw < 5e-4
    return ok, f"wilson(0/1e4) {hw:.2e}"


def check_rk4_order():
    model = ControlAffineModel(1, 1, lambda x: -np.asarray(x, float), lambda x: np.zeros((1, 1)))
    errs = []
    for dt in (0.1, 0.05):
        x = np.array([1.0])
        for _ in range(int(round(1.0 / dt))):
            x = rk4_step(model, x, np.zeros(1), dt)
        errs.append(abs(x[0] - math.exp(-1.0)))
    factor = errs[0] / errs[1]
    return factor >= 14.0, f"error ratio {factor:.2f}"


@dataclass
class CheckResult:
    name: str
    suite: str
    ok: bool
    detail: str
    seconds: float


CHECKS: list[tuple[str, str, Callable]] = [
    ("barrier_gradient", "core", check_barrier_gradient),
    ("composite_gradient", "compose", check_composite_gradient),
    ("mlp_gradient", "trainer", check_mlp_gradient),
    ("rk4_order", "core", check_rk4_order),
    ("qp_grid_oracle", "qp", check_qp_grid),
    ("width_lp_vertex", "qp", check_width_lp),
    ("box_projection", "filter", check_projection),
    ("filter_noop", "filter", check_filter_noop),
    ("duration_guarantee", "filter", check_duration),
    ("generator_closed_form", "stochastic", check_generator),
    ("exit_bound", "stochastic", check_exit_bound),
]


def run_checks(checks=None) -> list[CheckResult]:
    out = []
    for name, suite, fn in checks or CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed invariant
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, suite, bool(ok), detail, time.perf_counter() - t0))
    return out
