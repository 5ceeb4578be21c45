"""Small dense LP and QP solvers.

Both solvers target the problem sizes that show up in safety filtering
(a handful of controls, a few dozen constraints) and favour exactness and
determinism over speed: the LP is a two-phase tableau simplex and the QP a
primal active-set method on a Cholesky factor of the Hessian. Degenerate
choices are resolved by Bland's rule (lowest index first).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Polytope
from .errors import Infeasible, MaxIterations, NumericalError, Unbounded

PIVOT_TOL = 1e-11
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class AffineIneqSet:
    """Rows ``G u <= h``."""

    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        h = np.asarray(self.h, dtype=float).ravel()
        if G.ndim == 1:
            G = G.reshape(h.size, -1) if h.size else G.reshape(0, G.size)
        if G.shape[0] != h.size:
            raise ValueError("row count mismatch")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(h))):
            raise NumericalError("constraint coefficients must be finite")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @classmethod
    def from_arrays(cls, G, h) -> "AffineIneqSet":
        return cls(np.atleast_2d(np.asarray(G, dtype=float)), np.asarray(h, dtype=float))

    @classmethod
    def from_rows(cls, rows, n: int) -> "AffineIneqSet":
        rows = list(rows)
        if not rows:
            return cls.empty(n)
        G = np.array([np.asarray(a, dtype=float).ravel() for a, _ in rows])
        h = np.array([float(c) for _, c in rows])
        return cls(G, h)

    @classmethod
    def empty(cls, n: int) -> "AffineIneqSet":
        return cls(np.zeros((0, n)), np.zeros(0))

    @property
    def rows(self):
        return [(self.G[i].copy(), float(self.h[i])) for i in range(len(self.h))]

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    def __len__(self):
        return len(self.h)

    def stack(self, other: "AffineIneqSet") -> "AffineIneqSet":
        return AffineIneqSet(np.vstack([self.G, other.G]), np.concatenate([self.h, other.h]))


def _combine(ineqs: Optional[AffineIneqSet], box: Optional[Polytope], n: int) -> AffineIneqSet:
    parts = []
    if ineqs is not None and len(ineqs):
        parts.append(ineqs)
    if box is not None:
        parts.append(AffineIneqSet(box.A, box.b))
    if not parts:
        return AffineIneqSet.empty(n)
    out = parts[0]
    for p in parts[1:]:
        out = out.stack(p)
    return out


# ---------------------------------------------------------------------------
# Linear programming


def _pivot(T: np.ndarray, r: int, j: int):
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _run_simplex(T: np.ndarray, basis: list, allowed: int, max_iter: int) -> None:
    """Minimize the objective held in T's last row (reduced costs) with Bland's rule."""
    m = T.shape[0] - 1
    for _ in range(max_iter):
        reduced = T[-1, :allowed]
        cand = np.flatnonzero(reduced < -PIVOT_TOL)
        if cand.size == 0:
            return
        j = int(cand[0])
        col = T[:m, j]
        rows = np.flatnonzero(col > PIVOT_TOL)
        if rows.size == 0:
            raise Unbounded("LP is unbounded in the objective direction")
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        r = int(min(ties, key=lambda i: basis[i]))
        _pivot(T, r, j)
        basis[r] = j
    raise MaxIterations("simplex iteration limit reached")


def _simplex_free(c: np.ndarray, G: np.ndarray, h: np.ndarray, max_iter: int = 5000) -> np.ndarray:
    """min c^T x s.t. G x <= h with x free; returns x."""
    m, n = G.shape
    if m == 0:
        if np.any(np.abs(c) > 0):
            raise Unbounded("LP without constraints is unbounded")
        return np.zeros(n)
    # columns: x+ (n), x- (n), slack (m), artificial (k)
    sign = np.where(h < 0, -1.0, 1.0)
    art_rows = np.flatnonzero(h < 0)
    k = art_rows.size
    ncols = 2 * n + m + k
    T = np.zeros((m + 1, ncols + 1))
    T[:m, :n] = G * sign[:, None]
    T[:m, n : 2 * n] = -G * sign[:, None]
    T[:m, 2 * n : 2 * n + m] = np.diag(sign)
    T[:m, -1] = h * sign
    basis = [2 * n + i for i in range(m)]
    for a, i in enumerate(art_rows):
        T[i, 2 * n + m + a] = 1.0
        basis[i] = 2 * n + m + a

    if k:
        # phase 1: minimize sum of artificials
        T[-1, :] = 0.0
        T[-1, 2 * n + m : 2 * n + m + k] = 1.0
        for i in art_rows:
            T[-1] -= T[i]
        _run_simplex(T, basis, ncols, max_iter)
        if -T[-1, -1] > 1e-9 * max(1.0, np.max(np.abs(h))):
            raise Infeasible("constraint set is empty")
        # drive remaining artificials out of the basis
        for r in range(m):
            if basis[r] >= 2 * n + m:
                nz = np.flatnonzero(np.abs(T[r, : 2 * n + m]) > PIVOT_TOL)
                if nz.size:
                    j = int(nz[0])
                    _pivot(T, r, j)
                    basis[r] = j
                else:
                    T[r, :] = 0.0  # redundant row
        T = np.delete(T, np.s_[2 * n + m : 2 * n + m + k], axis=1)
    ncols = 2 * n + m
    cost = np.concatenate([c, -c, np.zeros(m)])
    T[-1, :] = 0.0
    T[-1, :ncols] = cost
    for r in range(m):
        if basis[r] < ncols and cost[basis[r]] != 0.0:
            T[-1] -= cost[basis[r]] * T[r]
    _run_simplex(T, basis, ncols, max_iter)

    z = np.zeros(ncols)
    for r in range(m):
        if basis[r] < ncols:
            z[basis[r]] = T[r, -1]
    x = z[:n] - z[n : 2 * n]
    # polish onto the vertex defined by tight, nonbasic slacks
    slack_basic = {basis[r] - 2 * n for r in range(m) if 2 * n <= basis[r] < ncols}
    tight = [i for i in range(m) if i not in slack_basic]
    rows = _independent_rows(G, tight)
    if len(rows) == n:
        try:
            xv = np.linalg.solve(G[rows], h[rows])
            scale = max(1.0, np.max(np.abs(h)))
            if np.all(G @ xv <= h + FEAS_TOL * scale) and c @ xv <= c @ x + 1e-12 * max(1.0, abs(c @ x)):
                x = xv
        except np.linalg.LinAlgError:
            pass
    return x


def _independent_rows(G: np.ndarray, candidates, tol: float = 1e-10) -> list:
    """Greedy lowest-index selection of linearly independent rows."""
    chosen: list = []
    basis = np.zeros((0, G.shape[1]))
    for i in candidates:
        row = G[i]
        nrm = np.linalg.norm(row)
        if nrm == 0:
            continue
        if basis.shape[0]:
            resid = row - basis.T @ (basis @ row)
        else:
            resid = row
        rn = np.linalg.norm(resid)
        if rn > tol * nrm:
            chosen.append(int(i))
            basis = np.vstack([basis, resid / rn])
            if basis.shape[0] == G.shape[1]:
                break
    return chosen


def solve_lp(c, ineqs: Optional[AffineIneqSet], box: Optional[Polytope]):
    """Minimize ``c^T x`` over ``ineqs`` intersected with ``box``.

    Returns ``(x_star, value)``. Raises Infeasible or Unbounded.
    To maximize, negate ``c`` (and the returned value).
    """
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    cons = _combine(ineqs, box, n)
    x = _simplex_free(c, cons.G, cons.h)
    return x, float(c @ x)


def vertex_enumeration_lp(c, G, h, tol: float = 1e-9):
    """Brute-force LP oracle: best feasible vertex of {G x <= h}.

    Only sensible for a few variables. Returns (x, value) or raises Infeasible
    when no feasible vertex exists.
    """
    c = np.asarray(c, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    n = c.size
    best = None
    for rows in itertools.combinations(range(len(h)), n):
        A = G[list(rows)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        x = np.linalg.solve(A, h[list(rows)])
        if np.all(G @ x <= h + tol * max(1.0, np.max(np.abs(h)))):
            val = float(c @ x)
            if best is None or val < best[1]:
                best = (x, val)
    if best is None:
        raise Infeasible("no feasible vertex")
    return best


# ---------------------------------------------------------------------------
# Quadratic programming


@dataclass(frozen=True)
class QpProblem:
    """Minimize ``u^T H u + 2 b^T u`` subject to ``ineqs`` and ``u in box``."""

    H: np.ndarray
    b: np.ndarray
    ineqs: AffineIneqSet = None
    box: Optional[Polytope] = None
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        n = b.size
        if H.shape != (n, n):
            raise ValueError("H must be n x n")
        if not np.allclose(H, H.T, rtol=0.0, atol=1e-12):
            raise ValueError("H must be symmetric")
        try:
            chol = np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise ValueError("H must be positive definite") from exc
        ineqs = self.ineqs if self.ineqs is not None else AffineIneqSet.empty(n)
        if ineqs.dim != n and len(ineqs):
            raise ValueError("constraint dimension mismatch")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "ineqs", ineqs)
        object.__setattr__(self, "chol", chol)

    @property
    def n(self) -> int:
        return self.b.size

    def constraints(self) -> AffineIneqSet:
        return _combine(self.ineqs, self.box, self.n)

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.H @ u + 2 * self.b @ u)


def _cho_solve(Lc: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(Lc, rhs)
    return np.linalg.solve(Lc.T, y)


def _eqp_step(p: QpProblem, x: np.ndarray, W: list, G: np.ndarray):
    """Newton step of the equality-constrained subproblem on working set W.

    Returns (step, multipliers for W at the current point).
    """
    g = p.H @ x + p.b
    Hinv_g = _cho_solve(p.chol, g)
    if not W:
        return -Hinv_g, np.zeros(0)
    K = G[W]
    if len(W) == x.size:
        # vertex: the step is zero exactly, and ill-conditioned H would only add noise
        return np.zeros_like(x), np.linalg.solve(K.T, -g)
    Hinv_Kt = _cho_solve(p.chol, K.T)
    S = K @ Hinv_Kt
    lam = np.linalg.solve(S, -K @ Hinv_g)
    step = -(Hinv_g + Hinv_Kt @ lam)
    return step, lam


def solve_qp(p: QpProblem, max_iter: Optional[int] = None):
    """Primal active-set QP solve.

    Returns ``(u_star, active_set)`` where ``active_set`` lists the indices
    (into ``p.constraints()``) of the final working set in ascending order.
    """
    cons = p.constraints()
    G, h = cons.G, cons.h
    m, n = G.shape
    x = -_cho_solve(p.chol, p.b)
    if m == 0 or np.all(G @ x <= h + FEAS_TOL):
        return x, []
    # feasible starting vertex from phase-1 simplex
    x, _ = solve_lp(np.zeros(n), cons, None)
    scale = max(1.0, np.max(np.abs(h)))
    tight = np.flatnonzero(np.abs(G @ x - h) <= FEAS_TOL * scale)
    W = _independent_rows(G, tight)
    max_iter = max_iter or 50 * (m + n) + 100
    for _ in range(max_iter):
        step, lam = _eqp_step(p, x, W, G)
        if np.linalg.norm(step) <= 1e-12 * max(1.0, np.linalg.norm(x)):
            neg = [W[i] for i in range(len(W)) if lam[i] < -1e-12]
            if not neg:
                return x, sorted(W)
            W.remove(min(neg))
            continue
        Gp = G @ step
        alpha = 1.0
        block = None
        for i in range(m):
            if i in W or Gp[i] <= 1e-14:
                continue
            a = (h[i] - G[i] @ x) / Gp[i]
            a = max(a, 0.0)
            if a < alpha - 1e-15 or (block is not None and abs(a - alpha) <= 1e-15 and i < block):
                alpha = a
                block = i
        x = x + alpha * step
        if block is not None:
            W.append(block)
    raise MaxIterations("active-set iteration limit reached")


def kkt_residuals(p: QpProblem, u, active_set):
    """(stationarity, primal violation, complementarity) at a QP solution.

    Multipliers are recovered by least squares on the active rows of the
    scaled objective ``1/2 u^T H u + b^T u``.
    """
    cons = p.constraints()
    G, h = cons.G, cons.h
    u = np.asarray(u, dtype=float)
    grad = p.H @ u + p.b
    mu = np.zeros(len(h))
    if active_set:
        K = G[list(active_set)]
        sol, *_ = np.linalg.lstsq(K.T, -grad, rcond=None)
        mu[list(active_set)] = sol
    stationarity = float(np.max(np.abs(grad + G.T @ mu)))
    viol = float(max(0.0, np.max(G @ u - h))) if len(h) else 0.0
    comp = float(np.max(np.abs(mu * (G @ u - h)))) if len(h) else 0.0
    dual = float(max(0.0, -np.min(mu))) if len(h) else 0.0
    return stationarity, viol, comp, dual


def _boundary_points(G, h, lo, hi, step):
    """Points at spacing ``step`` along every constraint line inside the
    box, plus all pairwise line intersections."""
    pts = []
    diag = float(np.linalg.norm(hi - lo))
    centre = 0.5 * (lo + hi)
    for g, hv in zip(G, h):
        nrm = float(np.linalg.norm(g))
        if nrm < 1e-14:
            continue
        foot = centre + (hv - g @ centre) / nrm**2 * g
        d = np.array([-g[1], g[0]]) / nrm
        t = np.arange(-diag, diag + 0.5 * step, step)
        pts.append(foot + t[:, None] * d)
    for i in range(len(h)):
        for j in range(i + 1, len(h)):
            A = G[[i, j]]
            if abs(np.linalg.det(A)) > 1e-12:
                pts.append(np.linalg.solve(A, h[[i, j]])[None, :])
    if not pts:
        return np.empty((0, 2))
    P = np.concatenate(pts)
    return P[np.all((P >= lo - 1e-12) & (P <= hi + 1e-12), axis=1)]


def grid_search_qp(p: QpProblem, lo, hi, step: float = 1e-3, window: float = 0.05):
    """Independent grid oracle for 2-variable QPs over a box [lo, hi].

    A coarse pass (10x the step) locates the basin; a dense pass at ``step``
    covers a window around it. Falls back to the full dense grid when the
    coarse pass finds no feasible point. Candidates also include points at
    the same spacing along every constraint line: on a slanted active
    constraint the feasible lattice is jagged and its best point can sit
    far from the minimizer along the line.
    """
    cons = p.constraints()
    G, h = cons.G, cons.h
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    scale = np.maximum(1.0, np.abs(h))

    def best_of(pts, tol):
        if len(pts) == 0:
            return None
        feas = np.all(pts @ G.T <= h + tol * scale, axis=1)
        if not feas.any():
            return None
        q = pts[feas]
        obj = np.einsum("ij,jk,ik->i", q, p.H, q) + 2 * q @ p.b
        return q[np.argmin(obj)]

    def lattice(xs, ys):
        U1, U2 = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([U1.ravel(), U2.ravel()], axis=1)

    def objective(u):
        return float(u @ p.H @ u + 2 * p.b @ u)

    coarse = 10 * step
    u0 = best_of(lattice(np.arange(lo[0], hi[0] + 0.5 * coarse, coarse),
                         np.arange(lo[1], hi[1] + 0.5 * coarse, coarse)), 1e-12)
    if u0 is None:
        dense = best_of(lattice(np.arange(lo[0], hi[0] + 0.5 * step, step),
                                np.arange(lo[1], hi[1] + 0.5 * step, step)), 1e-12)
    else:
        wlo = np.maximum(lo, u0 - window)
        whi = np.minimum(hi, u0 + window)
        # keep the dense grid aligned with the global lattice
        wlo = lo + np.floor((wlo - lo) / step + 1e-9) * step
        dense = best_of(lattice(np.arange(wlo[0], whi[0] + 0.5 * step, step),
                                np.arange(wlo[1], whi[1] + 0.5 * step, step)), 1e-12)
    edge = best_of(_boundary_points(G, h, lo, hi, step), 1e-9)
    cands = [u for u in (dense, edge) if u is not None]
    if not cands:
        return None
    return min(cands, key=objective)


# ---------------------------------------------------------------------------
# Feasible width


@dataclass(frozen=True)
class WidthResult:
    width: float
    u: np.ndarray
    omega_max: float
    # u in U is imposed on top of u + omega*1 in U to keep the LP bounded
    u_in_U_imposed: bool = True


def width_lp(a, c: float, U: Polytope, omega_max: Optional[float] = None) -> WidthResult:
    """max omega s.t. a^T u + omega <= c, u + omega*1 in U, u in U, omega <= omega_max.

    Raises Infeasible when no admissible control exists (negative optimum).
    """
    a = np.asarray(a, dtype=float).ravel()
    n = a.size
    if omega_max is None:
        omega_max = 10.0 * U.diameter()
    ones = np.ones(n)
    rows = [np.concatenate([a, [1.0]])]
    rhs = [c]
    AU, bU = U.A, U.b
    G = np.vstack(
        [
            np.array(rows),
            np.hstack([AU, (AU @ ones)[:, None]]),
            np.hstack([AU, np.zeros((AU.shape[0], 1))]),
            np.concatenate([np.zeros(n), [1.0]])[None, :],
        ]
    )
    h = np.concatenate([rhs, bU, bU, [omega_max]])
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    try:
        z, val = solve_lp(cost, AffineIneqSet(G, h), None)
    except Infeasible:
        raise Infeasible("no admissible control: width LP infeasible") from None
    width = -val
    if width < -1e-12:
        raise Infeasible(f"no admissible control: width {width:.3g} < 0")
    return WidthResult(float(width), z[:n], float(omega_max))


def feasible_width(b, model, x, U: Polytope, omega_max: Optional[float] = None) -> float:
    """Width of the admissible control set of LDCBF ``b`` at state ``x``."""
    from .filter import ldcbf_halfspace

    hs = ldcbf_halfspace(b, model, x)
    return width_lp(hs.a, hs.c, U, omega_max).width


__all__ = [
    "AffineIneqSet",
    "QpProblem",
    "WidthResult",
    "feasible_width",
    "grid_search_qp",
    "kkt_residuals",
    "solve_lp",
    "solve_qp",
    "vertex_enumeration_lp",
    "width_lp",
]
