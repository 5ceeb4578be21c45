"""Domain types for control-affine dynamics and limited-duration barriers,
plus the fixed-step simulation primitives everything else is built on."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import Infeasible, NumericalError

Vector = np.ndarray
Policy = Callable[[np.ndarray], np.ndarray]

DEFAULT_DT = 0.01


def as_vec(x, dim: Optional[int] = None, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float array, optionally of length ``dim``."""
    v = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if v.size == 0:
        raise ValueError(f"{name} must have dim >= 1")
    if dim is not None and v.size != dim:
        raise ValueError(f"{name} has dim {v.size}, expected {dim}")
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise NumericalError(f"{name} has non-finite entry at index {bad[0]}", int(bad[0]))
    return v


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox); ``seed`` may be an int or SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    if isinstance(seed, np.random.SeedSequence):
        return seed.spawn(n)
    return np.random.SeedSequence(seed).spawn(n)


# ---------------------------------------------------------------------------
# Control set


@dataclass(frozen=True)
class Polytope:
    """The set ``{u : A u <= b}``.

    Nonemptiness is checked by an LP at construction; with ``bounded=True``
    the set is also checked to be bounded along every coordinate direction.
    """

    A: np.ndarray
    b: np.ndarray
    bounded: bool = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise ValueError("A and b row counts differ")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise NumericalError("polytope coefficients must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        self._verify()

    def _verify(self):
        from .qp import AffineIneqSet, solve_lp

        n = self.dim
        ineqs = AffineIneqSet.from_arrays(self.A, self.b)
        # raises Infeasible when empty
        solve_lp(np.zeros(n), ineqs, None)
        if self.bounded:
            for i in range(n):
                for sgn in (1.0, -1.0):
                    c = np.zeros(n)
                    c[i] = sgn
                    solve_lp(c, ineqs, None)

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        n = lo.size
        if np.any(lo > hi):
            raise Infeasible("box has lo > hi")
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float).ravel()
        return bool(np.all(self.A @ u <= self.b + tol))

    def box_bounds(self):
        """(lo, hi) if this polytope is an axis-aligned box, else None."""
        n = self.dim
        if self.A.shape[0] != 2 * n:
            return None
        eye = np.eye(n)
        if np.array_equal(self.A, np.vstack([eye, -eye])):
            return -self.b[n:], self.b[:n]
        return None

    def diameter(self) -> float:
        """Diameter of the bounding box (exact for boxes)."""
        bb = self.box_bounds()
        if bb is not None:
            lo, hi = bb
        else:
            from .qp import AffineIneqSet, solve_lp

            ineqs = AffineIneqSet.from_arrays(self.A, self.b)
            n = self.dim
            lo = np.empty(n)
            hi = np.empty(n)
            for i in range(n):
                e = np.zeros(n)
                e[i] = 1.0
                hi[i] = -solve_lp(-e, ineqs, None)[1]
                lo[i] = solve_lp(e, ineqs, None)[1]
        return float(np.linalg.norm(hi - lo))


# ---------------------------------------------------------------------------
# Dynamics


@dataclass(frozen=True)
class ControlAffineModel:
    """Dynamics ``xdot = f(x) + g(x) u`` on an axis-aligned state box."""

    n_x: int
    n_u: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    state_lo: Optional[np.ndarray] = None
    state_hi: Optional[np.ndarray] = None

    def drift(self, x) -> np.ndarray:
        return np.asarray(self.f(x), dtype=float).reshape(self.n_x)

    def input_matrix(self, x) -> np.ndarray:
        return np.asarray(self.g(x), dtype=float).reshape(self.n_x, self.n_u)

    def in_box(self, x) -> bool:
        if self.state_lo is None:
            return True
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.state_lo) and np.all(x <= self.state_hi))

    def sample_box(self, rng, n: int) -> np.ndarray:
        if self.state_lo is None:
            raise ValueError("model has no state box")
        lo = np.asarray(self.state_lo, dtype=float)
        hi = np.asarray(self.state_hi, dtype=float)
        return lo + (hi - lo) * rng.random((n, self.n_x))

    def lipschitz_spot_check(self, rng, n_pairs: int = 200, radius: float = 1e-3) -> float:
        """Largest finite-difference slope of (f, g) over random nearby pairs.

        Raises NumericalError if f or g is non-finite anywhere sampled.
        """
        xs = self.sample_box(rng, n_pairs)
        worst = 0.0
        for x in xs:
            dx = radius * rng.standard_normal(self.n_x)
            y = x + dx
            fx, fy = self.drift(x), self.drift(y)
            gx, gy = self.input_matrix(x), self.input_matrix(y)
            for arr in (fx, fy, gx, gy):
                if not np.all(np.isfinite(arr)):
                    raise NumericalError("model returned non-finite values")
            slope = (np.linalg.norm(fy - fx) + np.linalg.norm(gy - gx)) / np.linalg.norm(dx)
            worst = max(worst, float(slope))
        return worst


def eval_dynamics(model: ControlAffineModel, x, u) -> np.ndarray:
    """Return f(x) + g(x) u."""
    x = as_vec(x, model.n_x, "state")
    u = as_vec(u, model.n_u, "control")
    xdot = model.drift(x) + model.input_matrix(x) @ u
    bad = np.flatnonzero(~np.isfinite(xdot))
    if bad.size:
        raise NumericalError(f"dynamics non-finite at index {bad[0]}", int(bad[0]))
    return xdot


# ---------------------------------------------------------------------------
# Barrier functions


@dataclass(frozen=True)
class AlphaFn:
    """Rectified-linear comparison function alpha(q) = max(k q, 0)."""

    k: float = 1.0

    def __post_init__(self):
        if not (self.k >= 0 and math.isfinite(self.k)):
            raise ValueError("alpha slope must be finite and nonnegative")

    def __call__(self, q):
        return np.maximum(self.k * np.asarray(q, dtype=float), 0.0)


def ldcbf_threshold_value(L: float, beta: float, T: float) -> float:
    return L * math.exp(-beta * T) / beta


@dataclass(frozen=True)
class Ldcbf:
    """A limited-duration barrier B with safe set {B < L/beta} and initial
    set {B <= L e^{-beta T} / beta}.

    ``hess`` is optional; stochastic code falls back to finite differences.
    """

    B: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    L: float
    beta: float
    T: float
    alpha: AlphaFn = field(default_factory=AlphaFn)
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not (self.L > 0 and self.beta > 0 and self.T >= 0):
            raise ValueError("need L > 0, beta > 0, T >= 0")

    @property
    def threshold(self) -> float:
        return ldcbf_threshold_value(self.L, self.beta, self.T)

    @property
    def level(self) -> float:
        """Safe-set level L / beta."""
        return self.L / self.beta

    def value(self, x) -> float:
        v = float(self.B(np.asarray(x, dtype=float)))
        if not math.isfinite(v):
            raise NumericalError("barrier value is non-finite")
        return v

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float).ravel()

    def in_safe_set(self, x) -> bool:
        return self.value(x) < self.level

    def in_initial_set(self, x) -> bool:
        return self.value(x) <= self.threshold

    def with_alpha(self, alpha: AlphaFn) -> "Ldcbf":
        return Ldcbf(self.B, self.grad, self.L, self.beta, self.T, alpha, self.hess)

    def with_horizon(self, T: float) -> "Ldcbf":
        return Ldcbf(self.B, self.grad, self.L, self.beta, T, self.alpha, self.hess)


def ldcbf_threshold(b: Ldcbf) -> float:
    """L e^{-beta T} / beta."""
    return b.threshold


def fd_gradient(fun, x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def fd_hessian(fun, x, h: float = 1e-4) -> np.ndarray:
    """Symmetrized central-difference Hessian."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    f0 = fun(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            H[i, j] = (
                fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)
            ) / (4 * h**2)
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def gradient_mismatch(fun, grad, xs: Sequence, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between ``grad`` and central differences of ``fun``.

    The error at each point is ||g - fd||_inf / max(||fd||_inf, floor).
    """
    worst = 0.0
    for x in xs:
        fd = fd_gradient(fun, x, h)
        g = np.asarray(grad(np.asarray(x, dtype=float)), dtype=float).ravel()
        err = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), floor)
        worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class Trajectory:
    dt: float
    states: np.ndarray  # (N+1, n_x)
    controls: np.ndarray  # (N, n_u)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if len(self.controls) != len(self.states) - 1:
            raise ValueError("need len(controls) == len(states) - 1")

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.states))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return len(self.states)


def rk4_step(model: ControlAffineModel, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with u held constant."""

    def h(z):
        return model.drift(z) + model.input_matrix(z) @ u

    k1 = h(x)
    k2 = h(x + 0.5 * dt * k1)
    k3 = h(x + 0.5 * dt * k2)
    k4 = h(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def n_steps(dt: float, horizon: float) -> int:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if horizon < dt * (1 - 1e-9):
        raise ValueError("horizon must be >= dt")
    return int(round(horizon / dt))


def simulate(
    model: ControlAffineModel,
    policy: Policy,
    x0,
    dt: float = DEFAULT_DT,
    horizon: float = 1.0,
    stop: Optional[Callable[[np.ndarray], bool]] = None,
) -> Trajectory:
    """Fixed-step RK4 rollout with zero-order-hold control.

    If ``stop`` is given, the rollout ends right after the first state for
    which it returns True.
    """
    x = as_vec(x0, model.n_x, "x0")
    steps = n_steps(dt, horizon)
    states = np.empty((steps + 1, model.n_x))
    controls = np.empty((steps, model.n_u))
    states[0] = x
    k = 0
    for k in range(steps):
        if stop is not None and stop(x):
            break
        u = np.asarray(policy(x), dtype=float).reshape(model.n_u)
        x = rk4_step(model, x, u, dt)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state at step {k + 1}", k + 1)
        controls[k] = u
        states[k + 1] = x
    else:
        k = steps
    return Trajectory(dt, states[: k + 1].copy(), controls[:k].copy())


def first_exit_time(traj: Trajectory, in_safe: Callable[[np.ndarray], bool]) -> Optional[float]:
    """Earliest grid time whose state is not safe, or None."""
    if len(traj.states) == 0:
        raise ValueError("empty trajectory")
    for i, x in enumerate(traj.states):
        if not in_safe(x):
            return i * traj.dt
    return None
