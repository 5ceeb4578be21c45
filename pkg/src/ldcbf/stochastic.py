"""Stochastic limited-duration barriers for diffusions dx = h dt + eta dw.

The barrier condition has no class-K term here: -G(B) <= beta B, where
G(B) = -1/2 tr(B_xx eta eta^T) - grad B^T h is the generator. Exit
probabilities before T are validated by Euler-Maruyama Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ControlAffineModel, Polytope, Trajectory, as_vec, fd_hessian, make_rng, n_steps
from .errors import DegenerateLhat, EmptyInitialSet, NumericalError
from .filter import FilterReport, Halfspace, SLACK_WEIGHT, filter_halfspace, project_box_halfspace_batch
from .value_learn import FunctionApproximator, LearnedLdcbf, _offset_and_lhat

WILSON_Z = 1.959963984540054


@dataclass(frozen=True)
class DiffusionModel:
    drift: ControlAffineModel
    eta: Callable[[np.ndarray], np.ndarray]  # (n_x,) -> (n_x, n_w); batched (N, n_x) -> (N, n_x, n_w)
    n_w: int

    def diffusion(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.asarray(self.eta(x), dtype=float).reshape(self.drift.n_x, self.n_w)

    def lipschitz_spot_check(self, rng, n_pairs: int = 200, radius: float = 1e-3) -> float:
        """Largest observed ||eta(x)-eta(y)||_F / ||x-y|| (drift is checked by its own model)."""
        X = self.drift.sample_box(rng, n_pairs)
        worst = 0.0
        for x in X:
            d = rng.normal(size=x.size)
            d *= radius / np.linalg.norm(d)
            worst = max(worst, np.linalg.norm(self.diffusion(x + d) - self.diffusion(x)) / radius)
        return float(worst)


@dataclass
class StoppedPath:
    traj: Trajectory
    stop_time: Optional[float]


def _hessian(b, x):
    if getattr(b, "hess", None) is not None:
        return np.asarray(b.hess(x), dtype=float)
    return fd_hessian(b.value, x)


def generator_apply(b, dm: DiffusionModel, x, u) -> float:
    """-1/2 tr(B_xx eta eta^T) - grad B^T h(x, u)."""
    x = as_vec(x, dm.drift.n_x, "state")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    eta = dm.diffusion(x)
    h = dm.drift.drift(x) + dm.drift.input_matrix(x) @ u
    val = -0.5 * float(np.trace(_hessian(b, x) @ eta @ eta.T)) - float(b.gradient(x) @ h)
    if not math.isfinite(val):
        raise NumericalError("non-finite generator value")
    return val


def sldcbf_halfspace(b, dm: DiffusionModel, x) -> Halfspace:
    """grad B^T g u <= beta B - 1/2 tr(B_xx eta eta^T) - grad B^T f, i.e. -G(B) <= beta B."""
    x = np.asarray(x, dtype=float)
    grad = b.gradient(x)
    eta = dm.diffusion(x)
    Bx = b.value(x)
    a = dm.drift.input_matrix(x).T @ grad
    c = b.beta * Bx - 0.5 * float(np.trace(_hessian(b, x) @ eta @ eta.T)) - float(grad @ dm.drift.drift(x))
    if not (np.all(np.isfinite(a)) and math.isfinite(c)):
        raise NumericalError("non-finite half-space")
    return Halfspace(a, c)


def sldcbf_filter(b, dm: DiffusionModel, x, u_nom, U: Polytope, beta: Optional[float] = None,
                  slack_weight: float = SLACK_WEIGHT) -> FilterReport:
    """Minimal-deviation filter under the supermartingale condition.

    ``beta`` overrides the barrier's own rate when given.
    """
    x = as_vec(x, dm.drift.n_x, "state")
    u_nom = as_vec(u_nom, dm.drift.n_u, "nominal control")
    hs = sldcbf_halfspace(b, dm, x)
    if beta is not None and beta != b.beta:
        hs = Halfspace(hs.a, hs.c + (beta - b.beta) * b.value(x))
    return filter_halfspace(hs, u_nom, U, slack_weight, compute_width=False, where=x)


def exit_probability_bound(B0: float, L: float, beta: float, T: float) -> float:
    """min(1, beta e^{beta T} B0 / L)."""
    if B0 < 0:
        raise ValueError("B0 must be nonnegative")
    return min(1.0, beta * math.exp(beta * T) * B0 / L)


def wilson_halfwidth(k: int, n: int, z: float = WILSON_Z) -> float:
    p = k / n
    return z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))


def simulate_sde(dm: DiffusionModel, policy, x0, in_safe, T: float, dt: float, rng) -> StoppedPath:
    """Euler-Maruyama path frozen at the first exit from the safe set."""
    x = as_vec(x0, dm.drift.n_x, "x0")
    steps = n_steps(dt, T)
    sq = math.sqrt(dt)
    X = np.empty((steps + 1, x.size))
    Uc = np.zeros((steps, dm.drift.n_u))
    X[0] = x
    stop = None if in_safe(x) else 0.0
    for k in range(steps):
        if stop is None:
            u = np.atleast_1d(policy(x)).astype(float)
            Uc[k] = u
            dw = rng.standard_normal(dm.n_w) * sq
            x = x + (dm.drift.drift(x) + dm.drift.input_matrix(x) @ u) * dt + dm.diffusion(x) @ dw
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite state at step {k + 1}", k + 1)
            if not in_safe(x):
                stop = (k + 1) * dt
        X[k + 1] = x
    return StoppedPath(Trajectory(dt, X, Uc), stop)


@dataclass
class McResult:
    freq: float
    halfwidth: float
    n_paths: int
    exits: int
    mean_discounted_B: Optional[np.ndarray] = None  # E[e^{-beta t} B(x(t))] per grid time
    se_discounted_B: Optional[np.ndarray] = None

    def __iter__(self):
        return iter((self.freq, self.halfwidth))


def mc_exit_probability(
    dm: DiffusionModel,
    policy,
    x0,
    in_safe,
    T: float,
    dt: float = 1e-3,
    n_paths: int = 10_000,
    seed=0,
    batched: bool = False,
    barrier=None,
    chunk: int = 2000,
) -> McResult:
    """Fraction of stopped paths that leave the safe set before T, with a
    Wilson 95% half-width.

    Each path draws its noise from its own stream spawned from ``seed``.
    With ``batched`` the callables act on (N, ...) arrays: ``policy(X)`` ->
    (N, n_u), ``in_safe(X)`` -> (N,), model f/g/eta batched. Passing
    ``barrier`` (with ``beta`` and batched ``B``) also records the mean of
    e^{-beta t} B along the paths.
    """
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    x0 = as_vec(x0, dm.drift.n_x, "x0")
    seqs = np.random.SeedSequence(seed if not isinstance(seed, np.random.SeedSequence) else seed.entropy)
    children = seqs.spawn(n_paths)
    steps = n_steps(dt, T)
    if not batched:
        exits = 0
        for ss in children:
            path = simulate_sde(dm, policy, x0, in_safe, T, dt, make_rng(ss))
            exits += path.stop_time is not None and path.stop_time < T + 1e-12
        return McResult(exits / n_paths, wilson_halfwidth(exits, n_paths), n_paths, exits)
    exits = 0
    sums = np.zeros(steps + 1) if barrier is not None else None
    sq_sums = np.zeros(steps + 1) if barrier is not None else None
    for start in range(0, n_paths, chunk):
        kids = children[start : start + chunk]
        N = len(kids)
        noise = np.stack([make_rng(ss).standard_normal((steps, dm.n_w)) for ss in kids], axis=1) * math.sqrt(dt)
        X = np.tile(x0, (N, 1))
        alive = np.asarray(in_safe(X), dtype=bool).copy()
        for k in range(steps + 1):
            if barrier is not None:
                d = math.exp(-barrier.beta * k * dt) * np.asarray(barrier.B(X), dtype=float).reshape(N)
                sums[k] += d.sum()
                sq_sums[k] += (d * d).sum()
            if k == steps:
                break
            if alive.any():
                Xa = X[alive]
                Ua = np.asarray(policy(Xa), dtype=float).reshape(len(Xa), dm.drift.n_u)
                F = np.asarray(dm.drift.f(Xa), dtype=float).reshape(Xa.shape)
                G = np.asarray(dm.drift.g(Xa), dtype=float).reshape(len(Xa), dm.drift.n_x, dm.drift.n_u)
                E = np.asarray(dm.eta(Xa), dtype=float).reshape(len(Xa), dm.drift.n_x, dm.n_w)
                Xa = Xa + (F + np.einsum("ijk,ik->ij", G, Ua)) * dt + np.einsum("ijk,ik->ij", E, noise[k][alive])
                if not np.all(np.isfinite(Xa)):
                    raise NumericalError(f"non-finite state at step {k + 1}", k + 1)
                X[alive] = Xa
                still = np.asarray(in_safe(Xa), dtype=bool)
                idx = np.flatnonzero(alive)
                alive[idx[~still]] = False
        exits += int(np.count_nonzero(~alive))
    res = McResult(exits / n_paths, wilson_halfwidth(exits, n_paths), n_paths, exits)
    if barrier is not None:
        mean = sums / n_paths
        var = np.maximum(sq_sums / n_paths - mean**2, 0.0)
        res.mean_discounted_B = mean
        res.se_discounted_B = np.sqrt(var / n_paths)
    return res


def sldcbf_policy_batch(b, dm: DiffusionModel, nominal_batch, U: Polytope):
    """Batched filtered policy for box U. ``b.hess(X)`` must be batched
    (N, n_x, n_x); ``b.B``/``b.grad`` batched as well."""
    bounds = U.box_bounds()
    if bounds is None:
        raise ValueError("batched stochastic filter needs a box control set")

    def policy(X):
        X = np.atleast_2d(X)
        N, n = X.shape
        grad = np.asarray(b.grad(X), dtype=float).reshape(N, n)
        Bx = np.asarray(b.B(X), dtype=float).reshape(N)
        H = np.asarray(b.hess(X), dtype=float).reshape(N, n, n)
        E = np.asarray(dm.eta(X), dtype=float).reshape(N, n, dm.n_w)
        F = np.asarray(dm.drift.f(X), dtype=float).reshape(N, n)
        G = np.asarray(dm.drift.g(X), dtype=float).reshape(N, n, dm.drift.n_u)
        A = np.einsum("ijk,ij->ik", G, grad)
        tr = np.einsum("ijk,ikl,ijl->i", H, E, E)
        c = b.beta * Bx - 0.5 * tr - np.einsum("ij,ij->i", grad, F)
        Unom = np.asarray(nominal_batch(X), dtype=float).reshape(N, dm.drift.n_u)
        Uc, _ = project_box_halfspace_batch(Unom, A, c, *bounds)
        return Uc

    return policy


class _FdHessAdapter:
    def __init__(self, v: FunctionApproximator):
        self.v = v

    def value(self, x):
        return float(self.v.value(x))

    def gradient(self, x):
        return np.asarray(self.v.grad(x), dtype=float)

    hess = None


def extract_sldcbf(
    v: FunctionApproximator,
    dm: DiffusionModel,
    policy,
    beta: float,
    T: float,
    delta: float,
    safe_samples,
    unsafe_samples,
    c_margin: Optional[float] = None,
) -> LearnedLdcbf:
    """Stochastic analogue of extract_ldcbf: the implied cost is
    beta V + G(V) and the initial-set threshold is scaled by (1 - delta)."""
    if not 0 <= delta <= 1:
        raise ValueError("delta must lie in [0, 1]")
    safe_samples = np.atleast_2d(np.asarray(safe_samples, dtype=float))
    unsafe_samples = np.atleast_2d(np.asarray(unsafe_samples, dtype=float))
    if len(safe_samples) == 0 or len(unsafe_samples) == 0:
        raise ValueError("need safe and unsafe samples")
    ad = _FdHessAdapter(v)
    ell = np.array([beta * ad.value(x) + generator_apply(ad, dm, x, policy(x)) for x in safe_samples])
    c, L_hat, ell_min = _offset_and_lhat(ell, np.asarray(v.value(unsafe_samples)), beta, c_margin)
    if not L_hat > 0:
        raise DegenerateLhat(f"L_hat = {L_hat:.3g} <= 0")
    out = LearnedLdcbf(v, c, L_hat, beta, T, ell_hat_min=ell_min, delta=delta)
    n_init = int(np.count_nonzero(out.in_initial_set(safe_samples)))
    if n_init == 0:
        raise EmptyInitialSet("no sample lies in the extracted initial set")
    out.n_initial = n_init
    return out
