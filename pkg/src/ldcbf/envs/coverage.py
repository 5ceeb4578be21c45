"""Battery-constrained multi-agent coverage.

Each agent i has state (E_i, p_i) with single-integrator kinematics. Agents
follow Lloyd's algorithm toward the density-weighted centroid of their
Voronoi cell, filtered by the energy barrier

    B(E, p) = E_max - E + rho(p),   rho(p) = (K_d / v_max) softnorm(p - station)

which must stay below L/beta = E_max - E_min. The filter assumes the
worst-case drain dE/dt = -K_d; the simulated battery follows dE/dt = -0.01 E.
An agent inside the docking radius holds still and charges up to E_ch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..core import AlphaFn, ControlAffineModel, Ldcbf, make_rng
from ..errors import ConfigError, DuplicatePoints
from ..filter import project_box_halfspace_batch

log = logging.getLogger(__name__)

SOFT_EPS = 1e-3


def default_density(P):
    """Two Gaussian bumps."""
    P = np.asarray(P, dtype=float)
    x, y = P[..., 0], P[..., 1]
    return np.exp(-((x - 0.2) ** 2 + (y - 0.3) ** 2) / 0.06) + 0.5 * np.exp(-((x + 0.2) ** 2 + (y + 0.1) ** 2) / 0.03)


@dataclass
class CoverageParams:
    domain: tuple = (-1.6, 1.6, -1.0, 1.0)  # xmin, xmax, ymin, ymax
    E_max: float = 1.0
    E_min: float = 0.55
    E_ch: float = 0.92
    K_d: float = 0.01
    beta: float = 0.005
    T: float = 50.0
    v_max: float = 0.2
    u_max: float = 0.2  # per-axis speed bound
    k_p: float = 1.0
    alpha: float = 1.0
    charge_rate: float = 0.005
    dock_radius: float = 0.05
    drain: float = 0.01  # actual battery law dE/dt = -drain * E
    grid: int = 200

    @property
    def L(self) -> float:
        return self.beta * (self.E_max - self.E_min)

    @property
    def threshold(self) -> float:
        return self.L * math.exp(-self.beta * self.T) / self.beta

    @property
    def level(self) -> float:
        return self.L / self.beta


@dataclass
class CoverageWorld:
    params: CoverageParams
    E: np.ndarray  # (n,)
    P: np.ndarray  # (n, 2)
    stations: np.ndarray  # (n, 2)
    density: Callable = default_density
    docked: np.ndarray = None
    armed: np.ndarray = None
    t: float = 0.0
    last_slack: np.ndarray = None

    def __post_init__(self):
        n = len(self.E)
        if n == 0:
            raise ConfigError("need at least one agent")
        if self.P.shape != (n, 2) or self.stations.shape != (n, 2):
            raise ConfigError("positions and stations must be (n, 2)")
        if np.any(self.E < 0) or np.any(self.E > self.params.E_max):
            raise ConfigError("energies must lie in [0, E_max]")
        x0, x1, y0, y1 = self.params.domain
        s = self.stations
        if np.any(s[:, 0] < x0) or np.any(s[:, 0] > x1) or np.any(s[:, 1] < y0) or np.any(s[:, 1] > y1):
            raise ConfigError("stations must lie inside the domain")
        if self.docked is None:
            self.docked = np.zeros(n, dtype=bool)
        if self.armed is None:
            self.armed = np.ones(n, dtype=bool)
        if self.last_slack is None:
            self.last_slack = np.zeros(n)

    @property
    def n(self) -> int:
        return len(self.E)

    def copy(self) -> "CoverageWorld":
        return replace(self, E=self.E.copy(), P=self.P.copy(), stations=self.stations.copy(),
                       docked=self.docked.copy(), armed=self.armed.copy(), last_slack=self.last_slack.copy())


# ---------------------------------------------------------------------------
# Voronoi geometry


def _clip(poly, a, b):
    """Sutherland-Hodgman clip of a convex polygon to {z : a.z <= b}."""
    out = []
    m = len(poly)
    for k in range(m):
        cur, nxt = poly[k], poly[(k + 1) % m]
        fc, fn = a @ cur - b, a @ nxt - b
        if fc <= 0:
            out.append(cur)
        if fc * fn < 0:
            t = fc / (fc - fn)
            out.append(cur + t * (nxt - cur))
    return out


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def voronoi_cells(points, domain) -> list:
    """Cells of the bounded Voronoi diagram as vertex arrays (counter-clockwise)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x0, x1, y0, y1 = domain
    for i in range(len(pts)):
        d = np.linalg.norm(pts[i + 1 :] - pts[i], axis=1)
        if np.any(d < 1e-12):
            raise DuplicatePoints(f"agent {i} coincides with another agent")
    rect = [np.array(v, dtype=float) for v in ((x0, y0), (x1, y0), (x1, y1), (x0, y1))]
    cells = []
    for i, p in enumerate(pts):
        poly = list(rect)
        for j, q in enumerate(pts):
            if j == i or not poly:
                continue
            # closer to p than to q:  (q - p).z <= (|q|^2 - |p|^2) / 2
            poly = _clip(poly, q - p, 0.5 * (q @ q - p @ p))
        cells.append(np.array(poly).reshape(-1, 2))
    return cells


class _Quadrature:
    def __init__(self, domain, res: int, density):
        x0, x1, y0, y1 = domain
        hx, hy = (x1 - x0) / res, (y1 - y0) / res
        xs = x0 + hx * (np.arange(res) + 0.5)
        ys = y0 + hy * (np.arange(res) + 0.5)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        self.Z = np.column_stack([gx.ravel(), gy.ravel()])
        self.w = density(self.Z) * hx * hy
        self.z2 = np.sum(self.Z * self.Z, axis=1)
        self._m2Z = -2.0 * self.Z

    def assign(self, P):
        # |z|^2 is shared by every column, so it is left out of the argmin
        d2 = self._m2Z @ P.T
        d2 += np.sum(P * P, axis=1)
        return np.argmin(d2, axis=1), d2

    def centroids(self, P):
        lab, _ = self.assign(P)
        n = len(P)
        mass = np.bincount(lab, weights=self.w, minlength=n)
        cx = np.bincount(lab, weights=self.w * self.Z[:, 0], minlength=n)
        cy = np.bincount(lab, weights=self.w * self.Z[:, 1], minlength=n)
        C = P.copy()
        ok = mass > 0
        C[ok, 0] = cx[ok] / mass[ok]
        C[ok, 1] = cy[ok] / mass[ok]
        return C

    def cost(self, P):
        lab, d2 = self.assign(P)
        return float(np.sum(self.w * (d2[np.arange(len(lab)), lab] + self.z2)))


_QUAD_CACHE: dict = {}


def _quadrature(world: CoverageWorld) -> _Quadrature:
    key = (tuple(world.params.domain), world.params.grid, id(world.density))
    q = _QUAD_CACHE.get(key)
    if q is None:
        q = _QUAD_CACHE[key] = _Quadrature(world.params.domain, world.params.grid, world.density)
    return q


def lloyd_nominal(world: CoverageWorld) -> np.ndarray:
    """u_i = k_p (c_i - p_i) with c_i the density-weighted Voronoi centroid."""
    C = _quadrature(world).centroids(world.P)
    return world.params.k_p * (C - world.P)


def locational_cost(world: CoverageWorld) -> float:
    """sum_i int_{V_i} |p_i - z|^2 phi(z) dz by the same quadrature."""
    return _quadrature(world).cost(world.P)


# ---------------------------------------------------------------------------
# Energy barrier


def rho(P, station, params: CoverageParams):
    z = np.asarray(P, dtype=float) - station
    return (params.K_d / params.v_max) * (np.sqrt(np.sum(z * z, axis=-1) + SOFT_EPS**2) - SOFT_EPS)


def rho_grad(P, station, params: CoverageParams):
    z = np.asarray(P, dtype=float) - station
    return (params.K_d / params.v_max) * z / np.sqrt(np.sum(z * z, axis=-1, keepdims=True) + SOFT_EPS**2)


def agent_model(params: CoverageParams) -> ControlAffineModel:
    """Filter model on (E, x, y): worst-case drain, single integrator."""
    x0, x1, y0, y1 = params.domain

    def f(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 0] = -params.K_d
        return out

    def g(x):
        x = np.asarray(x, dtype=float)
        G = np.zeros(x.shape[:-1] + (3, 2))
        G[..., 1, 0] = 1.0
        G[..., 2, 1] = 1.0
        return G

    return ControlAffineModel(3, 2, f, g, np.array([0.0, x0, y0]), np.array([params.E_max, x1, y1]))


def energy_ldcbf(world: CoverageWorld, agent: int = 0) -> Ldcbf:
    """B(E, p) = E_max - E + rho(p) for one agent's station."""
    prm = world.params
    st = world.stations[agent].copy()

    def B(x):
        x = np.asarray(x, dtype=float)
        return prm.E_max - x[..., 0] + rho(x[..., 1:], st, prm)

    def grad(x):
        x = np.asarray(x, dtype=float)
        gr = np.empty_like(x)
        gr[..., 0] = -1.0
        gr[..., 1:] = rho_grad(x[..., 1:], st, prm)
        return gr

    return Ldcbf(B, grad, prm.L, prm.beta, prm.T, AlphaFn(prm.alpha))


def barrier_values(world: CoverageWorld) -> np.ndarray:
    prm = world.params
    return prm.E_max - world.E + rho(world.P, world.stations, prm)


def coverage_step(world: CoverageWorld, dt: float) -> CoverageWorld:
    """Advance all agents by dt (in place); returns the world.

    Agents inside the docking radius that are armed dock and charge until
    E_ch. An agent is re-armed once it leaves the radius or its barrier
    reaches the initial-set threshold, so a freshly charged agent leaves.
    """
    prm = world.params
    alpha = AlphaFn(prm.alpha)
    Bv = barrier_values(world)
    dist = np.linalg.norm(world.P - world.stations, axis=1)
    inside = dist <= prm.dock_radius
    world.armed |= (~inside) | (Bv >= prm.threshold)
    world.docked |= inside & world.armed & (world.E < prm.E_ch)

    Unom = lloyd_nominal(world)
    A = rho_grad(world.P, world.stations, prm)
    c = alpha(prm.threshold - Bv) + prm.beta * Bv - prm.K_d
    lo = np.full(2, -prm.u_max)
    U, slack = project_box_halfspace_batch(Unom, A, c, lo, -lo)
    U[world.docked] = 0.0
    slack[world.docked] = 0.0
    if np.any(slack > 0):
        log.warning("energy constraint relaxed for agents %s at t=%.2f", np.flatnonzero(slack > 0), world.t)
    world.last_slack = slack

    world.P = world.P + dt * U
    x0, x1, y0, y1 = prm.domain
    world.P[:, 0] = np.clip(world.P[:, 0], x0, x1)
    world.P[:, 1] = np.clip(world.P[:, 1], y0, y1)

    dock = world.docked
    world.E = np.where(dock, np.minimum(world.E + prm.charge_rate * dt, prm.E_max), world.E * math.exp(-prm.drain * dt))
    done = dock & (world.E >= prm.E_ch)
    world.docked &= ~done
    world.armed &= ~done
    world.t += dt
    return world


# ---------------------------------------------------------------------------
# Scenario helpers

DEFAULT_STATIONS = np.array([[-1.4, 0.8], [0.0, 0.8], [1.4, 0.8], [-1.4, -0.8], [0.0, -0.8], [1.4, -0.8]])


def random_world(params: CoverageParams, n_agents: int, seed, stations=None) -> CoverageWorld:
    """Agents at random positions with energies drawn so every barrier
    starts at or below the initial-set threshold."""
    if n_agents < 1:
        raise ConfigError("need at least one agent")
    rng = make_rng(seed)
    if stations is None:
        if n_agents > len(DEFAULT_STATIONS):
            raise ConfigError("supply stations for more than six agents")
        stations = DEFAULT_STATIONS[:n_agents]
    stations = np.asarray(stations, dtype=float)
    x0, x1, y0, y1 = params.domain
    P = np.column_stack([rng.uniform(x0, x1, n_agents), rng.uniform(y0, y1, n_agents)])
    E = np.empty(n_agents)
    for i in range(n_agents):
        r = float(rho(P[i], stations[i], params))
        # B = E_max - E + r <= threshold  <=>  E >= E_max + r - threshold
        e_lo = max(params.E_max + r - params.threshold, params.E_min)
        if e_lo > params.E_max:
            raise ConfigError(f"agent {i} cannot start inside the initial set")
        E[i] = rng.uniform(e_lo, params.E_max)
    return CoverageWorld(params, E, P, stations)


@dataclass
class CoverageRun:
    times: np.ndarray
    E: np.ndarray  # (steps+1, n)
    P: np.ndarray  # (steps+1, n, 2)
    B: np.ndarray
    docked: np.ndarray
    slack: np.ndarray
    min_energy: np.ndarray = field(default=None)

    def __post_init__(self):
        self.min_energy = self.E.min(axis=0)


def run_coverage(world: CoverageWorld, horizon: float, dt: float) -> CoverageRun:
    steps = int(round(horizon / dt))
    n = world.n
    E = np.empty((steps + 1, n))
    P = np.empty((steps + 1, n, 2))
    B = np.empty((steps + 1, n))
    D = np.zeros((steps + 1, n), dtype=bool)
    S = np.zeros((steps + 1, n))
    E[0], P[0], B[0], D[0] = world.E, world.P, barrier_values(world), world.docked
    for k in range(steps):
        coverage_step(world, dt)
        E[k + 1], P[k + 1], B[k + 1], D[k + 1] = world.E, world.P, barrier_values(world), world.docked
        S[k] = world.last_slack
    return CoverageRun(dt * np.arange(steps + 1), E, P, B, D, S)
