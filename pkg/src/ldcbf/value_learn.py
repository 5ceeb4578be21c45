"""Learning a discounted value function for a fixed policy and turning it
into a limited-duration barrier.

Rollouts run on the "virtual" system: once the state leaves the safe set it
is frozen, so the value of an unsafe state is L/beta (discrete: L/(1-gamma)).
The learned discrete-time value is converted to continuous time by
multiplying with the step ``dt``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import AlphaFn, ControlAffineModel, Ldcbf, make_rng, rk4_step
from .errors import DegenerateLhat, EmptyInitialSet, EmptyPool
from .nn import Adam, Mlp, Momentum, soft_update

log = logging.getLogger(__name__)


def beta_gamma_convert(gamma: float, dt: float) -> float:
    """Continuous discount rate for a per-step discount: beta = -ln(gamma) / dt."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return -math.log(gamma) / dt


def gamma_from_beta(beta: float, dt: float) -> float:
    return math.exp(-beta * dt)


# ---------------------------------------------------------------------------
# Transitions and replay


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    cost: float
    x_next: np.ndarray
    next_safe: bool

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("cost must be nonnegative")


class _Ring:
    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.size = 0
        self.pos = 0
        self.X = self.U = self.cost = self.Xn = None

    def _alloc(self, n_x, n_u):
        self.X = np.zeros((self.capacity, n_x))
        self.U = np.zeros((self.capacity, n_u))
        self.cost = np.zeros(self.capacity)
        self.Xn = np.zeros((self.capacity, n_x))

    def add(self, x, u, cost, xn):
        if self.X is None:
            self._alloc(len(x), len(u))
        i = self.pos
        self.X[i] = x
        self.U[i] = u
        self.cost[i] = cost
        self.Xn[i] = xn
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def arrays(self):
        if self.X is None:
            return None
        n = self.size
        return self.X[:n], self.U[:n], self.cost[:n], self.Xn[:n]


class ReplayBuffer:
    """Two ring buffers: transitions whose next state is safe (positive) and
    those that step out of the safe set (negative)."""

    def __init__(self, pos_capacity: int = 200_000, neg_capacity: int = 200_000):
        self.positive = _Ring(pos_capacity)
        self.negative = _Ring(neg_capacity)

    def add(self, tr: Transition):
        pool = self.positive if tr.next_safe else self.negative
        pool.add(np.asarray(tr.x, float), np.atleast_1d(np.asarray(tr.u, float)), float(tr.cost),
                 np.asarray(tr.x_next, float))

    def add_raw(self, x, u, cost, x_next, next_safe: bool):
        self.add(Transition(np.asarray(x, float), np.atleast_1d(u), float(cost), np.asarray(x_next, float),
                            bool(next_safe)))

    @property
    def n_positive(self) -> int:
        return self.positive.size

    @property
    def n_negative(self) -> int:
        return self.negative.size

    def __len__(self):
        return self.n_positive + self.n_negative

    def all(self):
        """Every stored transition as arrays (X, U, cost, Xn, next_safe)."""
        parts = []
        for pool, flag in ((self.positive, True), (self.negative, False)):
            arr = pool.arrays()
            if arr is not None and pool.size:
                parts.append((*arr, np.full(pool.size, flag)))
        if not parts:
            raise EmptyPool("buffer is empty")
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(5))

    def sample(self, rng: np.random.Generator, n_pos: int, n_neg: int):
        """Uniform within-pool sampling with fixed quotas (with replacement)."""
        parts = []
        for pool, k, flag in ((self.positive, n_pos, True), (self.negative, n_neg, False)):
            if k == 0:
                continue
            if pool.size == 0:
                raise EmptyPool(f"{'positive' if flag else 'negative'} pool empty but quota is {k}")
            idx = rng.integers(0, pool.size, k)
            X, U, c, Xn = pool.arrays()
            parts.append((X[idx], U[idx], c[idx], Xn[idx], np.full(k, flag)))
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(5))

    def to_bytes(self) -> bytes:
        out = bytearray()
        for pool in (self.positive, self.negative):
            out += struct.pack("<Q", pool.size)
            arr = pool.arrays()
            if arr is not None:
                for a in arr:
                    out += np.ascontiguousarray(a, dtype="<f8").tobytes()
        return bytes(out)


# ---------------------------------------------------------------------------
# Function approximators


class FunctionApproximator:
    """Scalar function of the state with a flat parameter vector.

    Subclasses provide ``value``/``grad`` for a single state (n,) or a batch
    (N, n) and a ``fit_step`` toward regression targets.
    """

    params: np.ndarray

    def value(self, X):
        raise NotImplementedError

    def grad(self, X):
        raise NotImplementedError

    def fit_step(self, X, y, step: float):
        raise NotImplementedError

    def copy(self):
        raise NotImplementedError

    def __call__(self, X):
        return self.value(X)

    def soft_update_from(self, other: "FunctionApproximator", mu: float):
        soft_update(self.params, other.params, mu)


class GridInterpolant(FunctionApproximator):
    """Multilinear interpolation of node values on a regular grid.

    Outside the box the value is that of the nearest boundary point, with
    zero gradient along clamped axes. On a cell face the gradient of the
    upper cell is used.
    """

    def __init__(self, lo, hi, shape, params=None):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.shape = tuple(int(s) for s in np.atleast_1d(shape))
        if len(self.shape) != self.lo.size or min(self.shape) < 2:
            raise ValueError("need >= 2 nodes per axis")
        self.h = (self.hi - self.lo) / (np.array(self.shape) - 1)
        self.params = np.zeros(int(np.prod(self.shape))) if params is None else np.asarray(params, float).copy()
        self._strides = np.array([int(np.prod(self.shape[i + 1 :])) for i in range(len(self.shape))])
        d = len(self.shape)
        self._corners = np.array(np.meshgrid(*[[0, 1]] * d, indexing="ij")).reshape(d, -1).T

    @property
    def dim(self) -> int:
        return len(self.shape)

    def nodes(self) -> np.ndarray:
        axes = [np.linspace(self.lo[i], self.hi[i], self.shape[i]) for i in range(self.dim)]
        return np.array(np.meshgrid(*axes, indexing="ij")).reshape(self.dim, -1).T

    def _locate(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        inside = (X >= self.lo) & (X <= self.hi)
        Xc = np.clip(X, self.lo, self.hi)
        s = (Xc - self.lo) / self.h
        idx = np.clip(np.floor(s).astype(int), 0, np.array(self.shape) - 2)
        t = s - idx
        return idx, t, inside

    def _weights(self, idx, t):
        # (N, 2^d) flat node indices and weights
        corners = self._corners
        flat = (idx[:, None, :] + corners[None, :, :]) @ self._strides
        w = np.prod(np.where(corners[None, :, :] == 1, t[:, None, :], 1.0 - t[:, None, :]), axis=2)
        return flat, w

    def value(self, X):
        single = np.ndim(X) == 1
        idx, t, _ = self._locate(X)
        flat, w = self._weights(idx, t)
        v = np.sum(w * self.params[flat], axis=1)
        return float(v[0]) if single else v

    def grad(self, X):
        single = np.ndim(X) == 1
        idx, t, inside = self._locate(X)
        flat, _ = self._weights(idx, t)
        vals = self.params[flat]
        corners = self._corners
        G = np.empty_like(t)
        for k in range(self.dim):
            fac = np.where(corners[None, :, :] == 1, t[:, None, :], 1.0 - t[:, None, :])
            fac[:, :, k] = np.where(corners[:, k] == 1, 1.0, -1.0)[None, :]
            G[:, k] = np.sum(np.prod(fac, axis=2) * vals, axis=1) / self.h[k]
        G = np.where(inside, G, 0.0)
        return G[0] if single else G

    def fit_step(self, X, y, step: float = 1.0, mode: str = "average"):
        """One regression step toward targets ``y``.

        ``average``: each node moves a fraction ``step`` toward the
        weight-averaged target of the samples touching it (step=1 on data
        that sits on nodes is an exact tabular assignment).
        ``gradient``: plain gradient step on the mean squared error.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        idx, t, _ = self._locate(X)
        flat, w = self._weights(idx, t)
        n = self.params.size
        if mode == "average":
            num = np.bincount(flat.ravel(), weights=(w * y[:, None]).ravel(), minlength=n)
            den = np.bincount(flat.ravel(), weights=w.ravel(), minlength=n)
            has = den > 1e-12
            target = np.where(has, num / np.where(has, den, 1.0), self.params)
            self.params += step * (target - self.params)
        elif mode == "gradient":
            r = y - np.sum(w * self.params[flat], axis=1)
            g = np.bincount(flat.ravel(), weights=(w * r[:, None]).ravel(), minlength=n)
            self.params += step * 2.0 * g / len(y)
        else:
            raise ValueError(f"unknown fit mode {mode!r}")
        return self.params

    def copy(self):
        return GridInterpolant(self.lo, self.hi, self.shape, self.params)


class MlpApproximator(FunctionApproximator):
    """Scalar ReLU network trained on MSE by momentum gradient descent
    (``optimizer="momentum"``) or Adam."""

    def __init__(self, mlp: Mlp, momentum: float = 0.9, optimizer: str = "momentum"):
        if mlp.sizes[-1] != 1:
            raise ValueError("value network must have one output")
        if optimizer not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.mlp = mlp
        self.momentum = momentum
        self.optimizer = optimizer
        self._opt = None

    @property
    def params(self):
        return self.mlp.params

    @params.setter
    def params(self, value):
        self.mlp.set_params(value)

    def value(self, X):
        out = self.mlp.forward(X)
        return float(out[0]) if np.ndim(X) == 1 else out[:, 0]

    def grad(self, X):
        return self.mlp.input_gradient(X)

    def fit_step(self, X, y, step: float):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        pred = self.mlp.forward(X, cache=True)[:, 0]
        dout = (-2.0 / len(y)) * (y - pred)
        g, _, _ = self.mlp.backward(dout[:, None])
        if self._opt is None or self._opt.lr != step:
            self._opt = Adam(step) if self.optimizer == "adam" else Momentum(step, self.momentum)
        self._opt.step(self.mlp.params, g)
        return self.mlp.params

    def copy(self):
        return MlpApproximator(self.mlp.copy(), self.momentum, self.optimizer)


class Scaled(FunctionApproximator):
    """``scale * base`` (e.g. dt times a discrete-time value)."""

    def __init__(self, base: FunctionApproximator, scale: float):
        self.base = base
        self.scale = float(scale)

    @property
    def params(self):
        return self.base.params

    def value(self, X):
        return self.scale * self.base.value(X)

    def grad(self, X):
        return self.scale * self.base.grad(X)

    def fit_step(self, X, y, step):
        # the base regresses targets in its own units
        return self.base.fit_step(X, np.asarray(y, dtype=float) / self.scale, step)

    def copy(self):
        return Scaled(self.base.copy(), self.scale)


class Featurized(FunctionApproximator):
    """``base(phi(x))`` with the chain rule through a feature map.

    ``features(X)`` maps (N, n_x) -> (N, n_f) and ``jacobian(X)`` returns
    (N, n_f, n_x).
    """

    def __init__(self, base: FunctionApproximator, features: Callable, jacobian: Callable):
        self.base = base
        self.features = features
        self.jacobian = jacobian

    @property
    def params(self):
        return self.base.params

    def value(self, X):
        single = np.ndim(X) == 1
        v = self.base.value(self.features(np.atleast_2d(X)))
        return float(np.ravel(v)[0]) if single else v

    def grad(self, X):
        single = np.ndim(X) == 1
        Xb = np.atleast_2d(np.asarray(X, dtype=float))
        gf = np.atleast_2d(self.base.grad(self.features(Xb)))
        G = np.einsum("nf,nfx->nx", gf, self.jacobian(Xb))
        return G[0] if single else G

    def fit_step(self, X, y, step):
        return self.base.fit_step(self.features(np.atleast_2d(X)), y, step)

    def copy(self):
        return Featurized(self.base.copy(), self.features, self.jacobian)


# ---------------------------------------------------------------------------
# Rollouts and TD learning


class NodeSweep:
    """Initial-state sampler cycling through ``nodes`` (N, n_x) in a fresh
    shuffled order on every pass, so every node is visited once per pass."""

    def __init__(self, nodes):
        self.nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
        self.k = 0
        self.perm = None

    def __call__(self, rng):
        n = len(self.nodes)
        if self.k % n == 0:
            self.perm = rng.permutation(n)
        x = self.nodes[self.perm[self.k % n]].copy()
        self.k += 1
        return x


def collect_rollouts(
    model: ControlAffineModel,
    policy: Callable,
    init_sampler: Callable[[np.random.Generator], np.ndarray],
    dt: float,
    steps: int,
    episodes: int,
    safe_set: Callable[[np.ndarray], bool],
    seed,
    cost: Callable[[np.ndarray], float],
    buffer: Optional[ReplayBuffer] = None,
) -> ReplayBuffer:
    """Run ``episodes`` rollouts of ``policy`` on the frozen-outside-C system.

    ``policy(x, rng)`` or ``policy(x)``; ``init_sampler(rng)`` draws x0.
    An episode ends at its first unsafe state or after ``steps`` steps. A
    start outside C yields one negative self-transition (the frozen state).
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    rng = make_rng(seed)
    buf = buffer if buffer is not None else ReplayBuffer()
    takes_rng = _accepts_rng(policy)
    for _ in range(episodes):
        x = np.asarray(init_sampler(rng), dtype=float)
        if not safe_set(x):
            buf.add_raw(x, np.zeros(model.n_u), cost(x), x, False)
            continue
        for _ in range(steps):
            u = np.atleast_1d(policy(x, rng) if takes_rng else policy(x)).astype(float)
            xn = rk4_step(model, x, u, dt)
            ok = bool(safe_set(xn))
            buf.add_raw(x, u, cost(x), xn, ok)
            if not ok:
                break
            x = xn
    return buf


def _accepts_rng(fn) -> bool:
    import inspect

    try:
        return len(inspect.signature(fn).parameters) >= 2
    except (TypeError, ValueError):
        return False


def td_target(tr: Transition, gamma: float, L: float, v_target: FunctionApproximator) -> float:
    """cost + gamma V_target(x') when x' is safe, else L / (1 - gamma)."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if not tr.next_safe:
        return L / (1.0 - gamma)
    return float(tr.cost + gamma * v_target.value(np.asarray(tr.x_next, float)))


def td_targets(cost, Xn, next_safe, gamma: float, L: float, v_target: FunctionApproximator) -> np.ndarray:
    y = np.full(len(cost), L / (1.0 - gamma))
    if np.any(next_safe):
        y[next_safe] = cost[next_safe] + gamma * np.asarray(v_target.value(Xn[next_safe]))
    return y


def td_residual(buffer: ReplayBuffer, v: FunctionApproximator, gamma: float, L: float) -> float:
    """Mean absolute TD error of ``v`` against itself over the whole buffer."""
    X, _, c, Xn, ok = buffer.all()
    y = td_targets(c, Xn, ok, gamma, L, v)
    return float(np.mean(np.abs(y - v.value(X))))


@dataclass
class ValueTrainConfig:
    gamma: float
    L: float = 1.0
    minibatch: Optional[int] = 64  # None: full buffer each iteration
    pos_per_batch: int = 4
    soft_mu: float = 1e-2
    iters: int = 10_000
    step: float = 1e-2
    seed: int = 0
    tol: Optional[float] = None  # stop early once the TD residual drops below
    check_every: int = 100
    history: list = field(default_factory=list)


def train_value(
    buffer: ReplayBuffer,
    local: FunctionApproximator,
    target: FunctionApproximator,
    cfg: ValueTrainConfig,
) -> FunctionApproximator:
    """Fit ``local`` to TD targets computed with ``target``.

    After every fit step the target is soft-updated,
    target <- mu local + (1 - mu) target. The final mean TD residual is
    stored on ``local.td_residual`` and appended to ``cfg.history``.
    """
    rng = make_rng(cfg.seed)
    n_neg = 0 if cfg.minibatch is None else cfg.minibatch - cfg.pos_per_batch
    if cfg.minibatch is not None:
        if cfg.pos_per_batch and buffer.n_positive == 0:
            raise EmptyPool("positive pool is empty")
        if n_neg and buffer.n_negative == 0:
            raise EmptyPool("negative pool is empty")
        full = None
    else:
        full = buffer.all()
    it = -1
    for it in range(cfg.iters):
        if full is None:
            X, _, c, Xn, ok = buffer.sample(rng, cfg.pos_per_batch, n_neg)
        else:
            X, _, c, Xn, ok = full
        y = td_targets(c, Xn, ok, cfg.gamma, cfg.L, target)
        local.fit_step(X, y, cfg.step)
        target.soft_update_from(local, cfg.soft_mu)
        if cfg.tol is not None and (it + 1) % cfg.check_every == 0:
            resid = td_residual(buffer, local, cfg.gamma, cfg.L)
            cfg.history.append((it + 1, resid))
            if resid < cfg.tol:
                break
    resid = td_residual(buffer, local, cfg.gamma, cfg.L)
    cfg.history.append((it + 1, resid))
    local.td_residual = resid
    log.info("value training finished: mean TD residual %.3g", resid)
    return local


# ---------------------------------------------------------------------------
# From value function to LDCBF


def _policy_batch(policy, X):
    out = [np.atleast_1d(policy(x)) for x in X]
    return np.array(out, dtype=float)


def hjb_residual(v: FunctionApproximator, model: ControlAffineModel, policy, x, beta: float) -> float:
    """Implied immediate cost: beta V(x) - grad V(x)^T (f(x) + g(x) phi(x))."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(policy(x)).astype(float)
    xdot = model.drift(x) + model.input_matrix(x) @ u
    return float(beta * v.value(x) - np.asarray(v.grad(x)) @ xdot)


def hjb_residuals(v: FunctionApproximator, model: ControlAffineModel, policy, X, beta: float) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Uc = _policy_batch(policy, X)
    xdot = np.array([model.drift(x) + model.input_matrix(x) @ u for x, u in zip(X, Uc)])
    return beta * np.asarray(v.value(X)) - np.einsum("ij,ij->i", np.atleast_2d(v.grad(X)), xdot)


@dataclass
class LearnedLdcbf:
    """B = V + c_offset / beta with safe level L_hat / beta."""

    base: FunctionApproximator
    c_offset: float
    L_hat: float
    beta: float
    T: float
    alpha: AlphaFn = field(default_factory=AlphaFn)
    ell_hat_min: float = float("nan")
    n_initial: int = 0
    delta: float = 0.0

    def B(self, X):
        return self.base.value(X) + self.c_offset / self.beta

    def grad(self, X):
        return self.base.grad(X)

    @property
    def threshold(self) -> float:
        return (1.0 - self.delta) * self.L_hat * math.exp(-self.beta * self.T) / self.beta

    @property
    def level(self) -> float:
        return self.L_hat / self.beta

    @property
    def ldcbf(self) -> Ldcbf:
        return Ldcbf(self.B, self.grad, self.L_hat, self.beta, self.T, self.alpha)

    def in_initial_set(self, X):
        return np.asarray(self.B(X)) <= self.threshold

    def in_safe_set(self, X):
        return np.asarray(self.B(X)) < self.level


def _offset_and_lhat(ell_hat, v_unsafe, beta, c_margin, offset_quantile=0.0):
    ell_min = float(np.min(ell_hat))
    if c_margin is None:
        c_margin = 1e-3 * float(np.max(np.abs(ell_hat)))
    if offset_quantile is None:
        c = 0.0
    else:
        c = max(0.0, -float(np.quantile(ell_hat, offset_quantile))) + c_margin
    L_hat = float(np.min(beta * (v_unsafe + c / beta)))
    return c, L_hat, ell_min


def extract_ldcbf(
    v: FunctionApproximator,
    model: ControlAffineModel,
    policy,
    beta: float,
    T: float,
    safe_samples,
    unsafe_samples,
    alpha: AlphaFn = AlphaFn(),
    c_margin: Optional[float] = None,
    offset_quantile: Optional[float] = 0.0,
) -> LearnedLdcbf:
    """Offset the value so its implied cost is nonnegative on the safe
    samples, then take L_hat as the smallest beta * B over unsafe samples.

    ``offset_quantile`` picks the residual statistic the offset cancels:
    0.0 is the minimum (the guaranteed construction), larger values ignore
    that fraction of the most negative residuals, and None uses the value
    as it is (offset 0, no margin).

    Raises DegenerateLhat when L_hat <= 0 and EmptyInitialSet when no safe
    sample lies in the resulting initial set.
    """
    safe_samples = np.atleast_2d(np.asarray(safe_samples, dtype=float))
    unsafe_samples = np.atleast_2d(np.asarray(unsafe_samples, dtype=float))
    if len(safe_samples) == 0 or len(unsafe_samples) == 0:
        raise ValueError("need safe and unsafe samples")
    ell_hat = hjb_residuals(v, model, policy, safe_samples, beta)
    c, L_hat, ell_min = _offset_and_lhat(ell_hat, np.asarray(v.value(unsafe_samples)), beta, c_margin,
                                        offset_quantile)
    if not L_hat > 0:
        raise DegenerateLhat(f"L_hat = {L_hat:.3g} <= 0")
    out = LearnedLdcbf(v, c, L_hat, beta, T, alpha, ell_min)
    n_init = int(np.count_nonzero(out.in_initial_set(safe_samples)))
    if n_init == 0:
        raise EmptyInitialSet("no sample lies in the extracted initial set")
    out.n_initial = n_init
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: little-endian header + float64 parameters

_MAGIC = b"LDCBFCK1"


def save_checkpoint(path, params: np.ndarray, layer_sizes: Sequence[int], gamma: float, dt: float, n_in: int = None):
    """Write ``params`` with a header (input dim, layer sizes, gamma, dt)."""
    params = np.ascontiguousarray(params, dtype="<f8")
    sizes = [int(s) for s in layer_sizes]
    n_in = sizes[0] if n_in is None else int(n_in)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", n_in, len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        fh.write(struct.pack("<ddQ", float(gamma), float(dt), params.size))
        fh.write(params.tobytes())


def load_checkpoint(path):
    """Returns dict(n_in, layer_sizes, gamma, dt, params)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a checkpoint file")
    off = 8
    n_in, n_layers = struct.unpack_from("<II", data, off)
    off += 8
    sizes = list(struct.unpack_from(f"<{n_layers}I", data, off))
    off += 4 * n_layers
    gamma, dt, n = struct.unpack_from("<ddQ", data, off)
    off += 24
    params = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
    return {"n_in": n_in, "layer_sizes": sizes, "gamma": gamma, "dt": dt, "params": params}
