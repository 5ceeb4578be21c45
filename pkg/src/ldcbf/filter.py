"""Minimal-deviation safety filtering against an LDCBF.

At a state x the barrier condition is one affine inequality in the control,
``a^T u <= c``. The filter projects a nominal control onto that half-space
intersected with the control polytope. When the intersection is empty the
projection is repeated with a quadratically penalized slack and the result
is flagged, since the duration guarantee needs hard feasibility.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ControlAffineModel, Ldcbf, Polytope, as_vec, rk4_step, n_steps
from .errors import Infeasible, NumericalError
from .qp import AffineIneqSet, QpProblem, solve_qp, width_lp

log = logging.getLogger(__name__)

SLACK_WEIGHT = 1e6
MODIFIED_TOL = 1e-9


@dataclass(frozen=True)
class Halfspace:
    a: np.ndarray
    c: float

    def violation(self, u) -> float:
        return float(self.a @ np.asarray(u, dtype=float) - self.c)


@dataclass(frozen=True)
class FilterReport:
    u: np.ndarray
    modified: bool
    slack: float = 0.0
    width: float = float("nan")

    @property
    def safety_void(self) -> bool:
        return self.slack > 0.0


def ldcbf_halfspace(b: Ldcbf, model: ControlAffineModel, x) -> Halfspace:
    """a = g(x)^T grad B(x);  c = alpha(theta - B) + beta B - grad B^T f(x)."""
    x = np.asarray(x, dtype=float)
    grad = b.gradient(x)
    Bx = b.value(x)
    a = model.input_matrix(x).T @ grad
    c = float(b.alpha(b.threshold - Bx)) + b.beta * Bx - float(grad @ model.drift(x))
    if not (np.all(np.isfinite(a)) and np.isfinite(c)):
        raise NumericalError("non-finite half-space")
    return Halfspace(a, c)


# ---------------------------------------------------------------------------
# Exact projection onto box ∩ half-space (with optional quadratic slack)


def _clip_path(u0, a, lam, lo, hi):
    return np.clip(u0 - 0.5 * lam[..., None] * a, lo, hi)


def project_box_halfspace_batch(U0, A, c, lo, hi, slack_weight: float = SLACK_WEIGHT):
    """Row-wise argmin ||u - u0||^2 over {lo <= u <= hi, a^T u <= c}.

    Rows whose feasible set is empty are re-solved with the penalized slack
    ``w s^2`` on ``a^T u <= c + s``. Returns (U, slack).

    The multiplier of the half-space is found exactly by scanning the kinks
    of the monotone piecewise-linear map lam -> a^T clip(u0 - lam a / 2).
    """
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    N, n = U0.shape
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,))

    start = np.clip(U0, lo, hi)
    out = start.copy()
    slack = np.zeros(N)
    need = np.einsum("ij,ij->i", A, start) > c
    if not need.any():
        return out, slack

    idx = np.flatnonzero(need)
    u0, a, cc = U0[idx], A[idx], c[idx]
    # smallest reachable a^T u over the box
    amin = np.sum(np.where(a > 0, a * lo, a * hi), axis=1)
    infeasible = amin > cc
    # s = lam / (2 w) on relaxed rows, 0 on hard rows
    inv2w = np.where(infeasible, 1.0 / (2.0 * slack_weight), 0.0)

    # lam -> a^T clip(u0 - lam a / 2) - c - lam/(2w) is nonincreasing and
    # piecewise linear; its kinks are where a coordinate meets a bound
    with np.errstate(divide="ignore", invalid="ignore"):
        kinks = np.concatenate([2.0 * (u0 - lo) / a, 2.0 * (u0 - hi) / a], axis=1)
    kinks = np.where(np.isfinite(kinks) & (kinks > 0), kinks, 0.0)
    bp = np.sort(np.concatenate([np.zeros((len(idx), 1)), kinks], axis=1), axis=1)
    Ub = _clip_path(u0[:, None, :], a[:, None, :], bp, lo, hi)
    r = np.einsum("ikj,ij->ik", Ub, a) - cc[:, None] - bp * inv2w[:, None]
    k = np.sum(r > 0, axis=1) - 1  # last kink with positive residual (r[:, 0] > 0)
    k = np.maximum(k, 0)
    rows = np.arange(len(idx))
    last = k == bp.shape[1] - 1
    kn = np.minimum(k + 1, bp.shape[1] - 1)
    r0, r1 = r[rows, k], r[rows, kn]
    b0, b1 = bp[rows, k], bp[rows, kn]
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = b0 + r0 * (b1 - b0) / (r0 - r1)
        beyond = b0 + r0 / inv2w
    lam = np.where(last, np.where(inv2w > 0, beyond, b0), np.where(r0 > r1, inner, b0))
    out[idx] = _clip_path(u0, a, lam, lo, hi)
    real = np.einsum("ij,ij->i", a, out[idx]) - cc
    slack[idx] = np.where(infeasible, np.maximum(real, 0.0), 0.0)
    return out, slack


def _solve_filter_qp(a, c, u_nom, U: Polytope, slack_weight: float):
    n = u_nom.size
    ineqs = AffineIneqSet(a[None, :], np.array([c]))
    try:
        u, _ = solve_qp(QpProblem(np.eye(n), -u_nom, ineqs, U))
        return u, 0.0
    except Infeasible:
        pass
    # variables (u, s): ||u - u_nom||^2 + w s^2 with a^T u - s <= c, s >= 0
    H = np.eye(n + 1)
    H[-1, -1] = slack_weight
    bvec = np.concatenate([-u_nom, [0.0]])
    G = np.vstack(
        [
            np.concatenate([a, [-1.0]])[None, :],
            np.hstack([U.A, np.zeros((U.A.shape[0], 1))]),
            np.concatenate([np.zeros(n), [-1.0]])[None, :],
        ]
    )
    h = np.concatenate([[c], U.b, [0.0]])
    z, _ = solve_qp(QpProblem(H, bvec, AffineIneqSet(G, h), None))
    u = z[:n]
    return u, max(0.0, float(a @ u - c))


def filter_control(
    b: Ldcbf,
    model: ControlAffineModel,
    x,
    u_nom,
    U: Polytope,
    slack_weight: float = SLACK_WEIGHT,
    compute_width: bool = True,
    use_qp: bool = False,
) -> FilterReport:
    """Project ``u_nom`` onto the admissible control set at ``x``.

    Box-shaped control sets use the exact closed-form projection unless
    ``use_qp`` is set; general polytopes always go through the active-set QP.
    """
    x = as_vec(x, model.n_x, "state")
    u_nom = as_vec(u_nom, model.n_u, "nominal control")
    hs = ldcbf_halfspace(b, model, x)
    return filter_halfspace(hs, u_nom, U, slack_weight, compute_width, use_qp, where=x)


def filter_halfspace(
    hs: Halfspace,
    u_nom,
    U: Polytope,
    slack_weight: float = SLACK_WEIGHT,
    compute_width: bool = True,
    use_qp: bool = False,
    where=None,
) -> FilterReport:
    """Minimal-deviation projection of ``u_nom`` onto {a^T u <= c} ∩ U."""
    u_nom = np.asarray(u_nom, dtype=float)
    bounds = None if use_qp else U.box_bounds()
    if bounds is not None:
        uu, ss = project_box_halfspace_batch(u_nom[None, :], hs.a[None, :], np.array([hs.c]), *bounds,
                                             slack_weight=slack_weight)
        u, slack = uu[0], float(ss[0])
    else:
        u, slack = _solve_filter_qp(hs.a, hs.c, u_nom, U, slack_weight)
    if not np.all(np.isfinite(u)):
        raise NumericalError("filter produced non-finite control")
    width = float("nan")
    if compute_width:
        try:
            width = width_lp(hs.a, hs.c, U).width
        except Infeasible:
            width = -np.inf
    modified = bool(np.linalg.norm(u - u_nom) > MODIFIED_TOL) or slack > 0
    if slack > 0:
        log.warning("barrier constraint infeasible at x=%s; slack %.3g (safety guarantee void)", where, slack)
    return FilterReport(u, modified, slack, width)


def filtered_policy(b: Ldcbf, model: ControlAffineModel, nominal, U: Polytope, reports: Optional[list] = None):
    """Wrap a nominal policy with the filter; optionally record reports."""

    def policy(x):
        rep = filter_control(b, model, x, nominal(x), U, compute_width=False)
        if reports is not None:
            reports.append(rep)
        return rep.u

    return policy


# ---------------------------------------------------------------------------
# Limited-duration certification by simulation


def comparison_bound_violation(Bvals: np.ndarray, threshold: float, beta: float, dt: float) -> float:
    """Worst excess of B over the exponential comparison bound.

    For every grid time t, T_p(t) is the last grid time <= t with
    B <= threshold; the bound there is B(T_p) exp(beta (t - T_p)).
    Columns are independent runs when ``Bvals`` is 2-D (time first).
    """
    Bvals = np.asarray(Bvals, dtype=float)
    if Bvals.ndim == 1:
        Bvals = Bvals[:, None]
    steps = Bvals.shape[0]
    t_idx = np.arange(steps)[:, None]
    below = Bvals <= threshold
    last = np.where(below, t_idx, -1)
    last = np.maximum.accumulate(last, axis=0)
    valid = last >= 0
    lp = np.where(valid, last, 0)
    B_tp = np.take_along_axis(Bvals, lp, axis=0)
    bound = B_tp * np.exp(beta * (t_idx - lp) * dt)
    viol = np.where(valid, Bvals - bound, -np.inf)
    return float(np.max(viol))


def certify_duration(
    b: Ldcbf,
    model: ControlAffineModel,
    nominal,
    x0,
    U: Polytope,
    dt: float,
    horizon: float,
):
    """Simulate the filtered nominal policy from x0.

    Returns ``(exit_time, max_bound_violation)``: the first grid time with
    B >= L/beta (None if never), and the worst excess of B over the
    exponential comparison bound anchored at the last time B <= theta.
    """
    x = as_vec(x0, model.n_x, "x0")
    steps = n_steps(dt, horizon)
    Bvals = np.empty(steps + 1)
    Bvals[0] = b.value(x)
    for k in range(steps):
        rep = filter_control(b, model, x, nominal(x), U, compute_width=False)
        x = rk4_step(model, x, rep.u, dt)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state at step {k + 1}", k + 1)
        Bvals[k + 1] = b.value(x)
    return _exit_and_bound(Bvals, b, dt)


def _exit_and_bound(Bvals, b: Ldcbf, dt: float):
    out = np.flatnonzero(Bvals >= b.level)
    exit_time = None if out.size == 0 else float(out[0] * dt)
    upto = Bvals if out.size == 0 else Bvals[: out[0] + 1]
    viol = comparison_bound_violation(upto, b.threshold, b.beta, dt)
    return exit_time, viol


# ---------------------------------------------------------------------------
# Batched variants for vectorized models and barriers


def halfspace_batch(b: Ldcbf, model: ControlAffineModel, X: np.ndarray):
    """Vectorized (A, c) for states X of shape (N, n_x).

    Requires ``model.f``, ``model.g``, ``b.B`` and ``b.grad`` to broadcast
    over a leading batch axis.
    """
    grad = np.asarray(b.grad(X), dtype=float).reshape(X.shape)
    Bx = np.asarray(b.B(X), dtype=float).reshape(len(X))
    F = np.asarray(model.f(X), dtype=float).reshape(X.shape)
    Gm = np.asarray(model.g(X), dtype=float).reshape(len(X), model.n_x, model.n_u)
    A = np.einsum("ijk,ij->ik", Gm, grad)
    c = b.alpha(b.threshold - Bx) + b.beta * Bx - np.einsum("ij,ij->i", grad, F)
    return A, c, Bx


def rk4_step_batch(model: ControlAffineModel, X: np.ndarray, Uc: np.ndarray, dt: float) -> np.ndarray:
    def h(Z):
        F = np.asarray(model.f(Z), dtype=float).reshape(Z.shape)
        Gm = np.asarray(model.g(Z), dtype=float).reshape(len(Z), model.n_x, model.n_u)
        return F + np.einsum("ijk,ik->ij", Gm, Uc)

    k1 = h(X)
    k2 = h(X + 0.5 * dt * k1)
    k3 = h(X + 0.5 * dt * k2)
    k4 = h(X + dt * k3)
    return X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class BatchCertificate:
    exit_times: np.ndarray  # NaN where the run never left the safe set
    max_bound_violation: float
    max_admissibility_violation: float
    max_slack: float
    B: np.ndarray  # (steps+1, N)


def certify_batch(
    b: Ldcbf,
    model: ControlAffineModel,
    nominal_batch: Callable[[np.ndarray, int], np.ndarray],
    X0,
    U: Polytope,
    dt: float,
    horizon: float,
) -> BatchCertificate:
    """Vectorized :func:`certify_duration` over many initial states.

    ``nominal_batch(X, k)`` returns nominal controls (N, n_u) at step k.
    U must be a box.
    """
    bounds = U.box_bounds()
    if bounds is None:
        raise ValueError("certify_batch needs a box control set")
    X = np.atleast_2d(np.asarray(X0, dtype=float))
    N = len(X)
    steps = n_steps(dt, horizon)
    Bs = np.empty((steps + 1, N))
    adm = 0.0
    max_slack = 0.0
    for k in range(steps):
        A, c, Bx = halfspace_batch(b, model, X)
        Bs[k] = Bx
        Unom = np.asarray(nominal_batch(X, k), dtype=float).reshape(N, model.n_u)
        Uc, slack = project_box_halfspace_batch(Unom, A, c, *bounds)
        hard = slack == 0
        if hard.any():
            adm = max(adm, float(np.max((np.einsum("ij,ij->i", A, Uc) - c)[hard])))
        max_slack = max(max_slack, float(slack.max()))
        X = rk4_step_batch(model, X, Uc, dt)
        if not np.all(np.isfinite(X)):
            raise NumericalError(f"non-finite state at step {k + 1}", k + 1)
    Bs[steps] = np.asarray(b.B(X), dtype=float).reshape(N)
    exit_times = np.full(N, np.nan)
    viol = -np.inf
    for j in range(N):
        et, v = _exit_and_bound(Bs[:, j], b, dt)
        if et is not None:
            exit_times[j] = et
        viol = max(viol, v)
    return BatchCertificate(exit_times, viol, adm, max_slack, Bs)
