"""Small reproducible experiment recipes shared by the CLI and the tests:
a one-dimensional learned barrier, an Ornstein-Uhlenbeck exit study and
batched coverage runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import AlphaFn, ControlAffineModel, Ldcbf, Polytope, make_rng, spawn_seeds
from .envs.coverage import CoverageParams, run_coverage, random_world
from .filter import halfspace_batch, project_box_halfspace_batch, rk4_step_batch
from .stochastic import DiffusionModel, exit_probability_bound, mc_exit_probability, sldcbf_policy_batch
from .value_learn import GridInterpolant, NodeSweep, Scaled, ValueTrainConfig, collect_rollouts, extract_ldcbf, gamma_from_beta, train_value


# ---------------------------------------------------------------------------
# 1-D learned barrier: xdot = u on [-2, 2], unsafe for x >= 1


@dataclass
class ToyConfig:
    lo: float = -2.0
    hi: float = 2.0
    boundary: float = 1.0
    nodes: int = 401
    dt: float = 0.02
    beta: float = 0.5
    L: float = 1.0
    ell_in: float = 0.05
    phi: float = 0.5  # rollout policy
    steps: int = 50
    sweeps: int = 2  # every grid node starts this many episodes
    iters: int = 4000
    tol: float = 1e-6
    T: float = 1.0
    seed: int = 0
    verify_points: int = 1000
    runs: int = 100
    sim_dt: float = 1e-3
    u_max: float = 1.0


def toy_model(cfg: ToyConfig = ToyConfig()) -> ControlAffineModel:
    return ControlAffineModel(1, 1, lambda x: np.zeros_like(np.asarray(x, float)),
                              lambda x: np.ones(np.shape(x) + (1,)), np.array([cfg.lo]), np.array([cfg.hi]))


@dataclass
class ToyResult:
    learned: object
    td_residual: float
    violations: int  # verification points in the learned safe set but outside C
    n_verify: int
    initial_interval: tuple
    runs_ok: int
    runs: int
    history: list = field(default_factory=list)


def run_toy(cfg: ToyConfig = ToyConfig()) -> ToyResult:
    model = toy_model(cfg)
    nodes = np.linspace(cfg.lo, cfg.hi, cfg.nodes)

    def safe(x):
        return float(x[0]) < cfg.boundary

    def cost(x):
        return cfg.ell_in if safe(x) else cfg.L

    s_roll, s_runs = np.random.SeedSequence(cfg.seed).spawn(2)
    buf = collect_rollouts(model, lambda x: cfg.phi, NodeSweep(nodes[:, None]), cfg.dt, cfg.steps,
                           cfg.sweeps * cfg.nodes, safe, s_roll, cost)
    grid = GridInterpolant([cfg.lo], [cfg.hi], [cfg.nodes])
    vcfg = ValueTrainConfig(gamma=gamma_from_beta(cfg.beta, cfg.dt), L=cfg.L, minibatch=None, soft_mu=1.0,
                            iters=cfg.iters, step=1.0, tol=cfg.tol)
    train_value(buf, grid, grid.copy(), vcfg)
    v = Scaled(grid, cfg.dt)
    inside = nodes < cfg.boundary
    learned = extract_ldcbf(v, model, lambda x: np.array([cfg.phi]), cfg.beta, cfg.T, nodes[inside][:, None],
                            nodes[~inside][:, None])

    xs = np.linspace(cfg.lo, cfg.hi, cfg.verify_points)[:, None]
    in_hat = learned.in_safe_set(xs)
    violations = int(np.count_nonzero(in_hat & (xs[:, 0] >= cfg.boundary)))
    init = xs[learned.in_initial_set(xs), 0]
    interval = (float(init.min()), float(init.max())) if init.size else (math.nan, math.nan)

    runs_ok = _toy_runs(learned, model, cfg, interval, s_runs)
    return ToyResult(learned, float(grid.td_residual), violations, len(xs), interval, runs_ok, cfg.runs,
                     list(vcfg.history))


def _toy_runs(learned, model, cfg: ToyConfig, interval, seed) -> int:
    """Filtered runs pushed toward the unsafe side from random starts in the
    learned initial set; counts runs that stay in C for all t < T."""
    if not np.isfinite(interval[0]):
        return 0
    rng = make_rng(seed)
    X = []
    while len(X) < cfg.runs:
        x = rng.uniform(*interval, size=(1, 1))
        if learned.in_initial_set(x)[0]:
            X.append(x[0])
    X = np.array(X)
    b = learned.ldcbf
    lo, hi = np.array([-cfg.u_max]), np.array([cfg.u_max])
    ok = np.ones(len(X), dtype=bool)
    steps = int(round(cfg.T / cfg.sim_dt))
    for _ in range(steps - 1):  # states at t = dt, ..., T - dt
        A, c, _ = halfspace_batch(b, model, X)
        U, _ = project_box_halfspace_batch(np.full((len(X), 1), cfg.u_max), A, c, lo, hi)
        X = rk4_step_batch(model, X, U, cfg.sim_dt)
        ok &= X[:, 0] < cfg.boundary
    return int(np.count_nonzero(ok))


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck exit probabilities under the stochastic filter


@dataclass
class OuConfig:
    kappa: float = 0.5  # mean reversion
    sigma: float = 0.3
    beta: float = 1.0
    L: float = 1.0
    offset: float = 0.1  # B = x^2 + offset; needs offset >= sigma^2 / beta for feasibility at x = 0
    u_max: float = 1.0
    dt: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    pairs: tuple = ((0.0, 0.5), (0.2, 1.0), (0.3, 0.5), (0.5, 0.25), (0.1, 1.5))


def ou_model(cfg: OuConfig = OuConfig()) -> DiffusionModel:
    """dx = (-kappa x + u) dt + sigma dW, batched over a leading axis."""
    drift = ControlAffineModel(1, 1, lambda x: -cfg.kappa * np.asarray(x, float),
                               lambda x: np.ones(np.shape(x) + (1,)), np.array([-2.0]), np.array([2.0]))
    return DiffusionModel(drift, lambda x: np.full(np.shape(x) + (1,), cfg.sigma), 1)


def ou_barrier(cfg: OuConfig = OuConfig()) -> Ldcbf:
    """B = x^2 + offset with level L / beta; value, gradient and Hessian batch."""

    def B(x):
        x = np.asarray(x, dtype=float)
        return np.sum(x * x, axis=-1) + cfg.offset

    def hess(x):
        x = np.asarray(x, dtype=float)
        return 2.0 * np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy()

    return Ldcbf(B, lambda x: 2.0 * np.asarray(x, dtype=float), cfg.L, cfg.beta, 1.0, AlphaFn(0.0), hess)


@dataclass
class ExitRow:
    x0: float
    T: float
    freq: float
    halfwidth: float
    bound: float
    exits: int
    max_rise_se: float  # largest excess of the discounted-B mean over B(x0), in standard errors

    @property
    def bound_ok(self) -> bool:
        return self.freq <= self.bound + self.halfwidth

    @property
    def supermartingale_ok(self) -> bool:
        return self.max_rise_se <= 2.0


def stochastic_check(cfg: OuConfig = OuConfig()) -> list:
    """Monte Carlo exit frequencies of the filtered outward-pushing policy."""
    dm = ou_model(cfg)
    b = ou_barrier(cfg)
    U = Polytope.box([-cfg.u_max], [cfg.u_max])
    policy = sldcbf_policy_batch(b, dm, lambda X: cfg.u_max * np.where(X >= 0, 1.0, -1.0), U)
    level = cfg.L / cfg.beta

    def in_safe(X):
        return np.asarray(b.B(X)) < level

    rows = []
    for i, (x0, T) in enumerate(cfg.pairs):
        res = mc_exit_probability(dm, policy, [x0], in_safe, T, cfg.dt, cfg.n_paths, seed=cfg.seed + i,
                                  batched=True, barrier=b)
        m, se = res.mean_discounted_B, res.se_discounted_B
        # E[e^{-beta t} B(x(t))] against its exact start value B(x0) at the quarter points
        k = np.round(np.linspace(0.25, 1.0, 4) * (len(m) - 1)).astype(int)
        rise = (m[k] - m[0]) / np.maximum(se[k], 1e-300)
        rows.append(ExitRow(x0, T, res.freq, res.halfwidth, exit_probability_bound(x0 * x0 + cfg.offset, cfg.L, cfg.beta, T),
                            res.exits, float(np.max(rise))))
    return rows


# ---------------------------------------------------------------------------
# Coverage batches


def coverage_batch(params: CoverageParams, seeds, n_agents: int = 6, horizon: float = 600.0, dt: float = 0.1):
    """One run per seed; returns [(seed, CoverageRun)]."""
    out = []
    for s in seeds:
        world = random_world(params, n_agents, s)
        out.append((s, run_coverage(world, horizon, dt)))
    return out


def child_seeds(seed: int, n: int) -> list:
    """``n`` integer seeds derived from ``seed``."""
    return [int(ss.generate_state(1)[0]) for ss in spawn_seeds(seed, n)]


# ---------------------------------------------------------------------------
# Cart-pole: balance, learn a barrier, filtered durations, transfer


@dataclass
class DurationConfig:
    trials: int = 10
    T: float = 5.0
    steps: int = 1000  # 10 s cap
    slope_low: float = 0.1
    slope_high: float = 3.0
    fixed_u: float = 1.0
    min_random: float = 5.0  # floor on the mean filtered random duration (the horizon T)
    min_fixed: float = 4.0
    retries: int = 1  # fresh-seed reruns after a failed attempt


@dataclass
class CartpoleOutcome:
    seed: int
    actor: object
    learned: object
    info: dict
    balance_score: float
    random_low: np.ndarray
    random_high: np.ndarray
    fixed: np.ndarray
    checks: dict
    trace: dict = field(default_factory=dict)  # policy -> rows of the filtered runs

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def cartpole_attempt(seed: int, balance, ldcbf_cfg, dur: DurationConfig = DurationConfig()) -> CartpoleOutcome:
    from dataclasses import replace

    from .trainer import filtered_durations, learn_cartpole_ldcbf, train_balance

    actor, _, _, score = train_balance(replace(balance, seed=seed))
    learned, info = learn_cartpole_ldcbf(actor, replace(ldcbf_cfg, seed=seed), obs_scaling=balance.obs_scaling)
    s_low, s_high, s_fix = spawn_seeds(seed, 3)

    def rand(x, rng):
        return rng.uniform(-1.0, 1.0)

    def fixed(x, rng):
        return dur.fixed_u

    kw = dict(T=dur.T, trials=dur.trials, steps=dur.steps)
    trace = {"random_low_slope": [], "random_high_slope": [], "fixed_u": []}
    low = filtered_durations(learned, rand, dur.slope_low, seed=s_low, trace=trace["random_low_slope"], **kw)
    high = filtered_durations(learned, rand, dur.slope_high, seed=s_high, trace=trace["random_high_slope"], **kw)
    fix = filtered_durations(learned, fixed, dur.slope_low, seed=s_fix, trace=trace["fixed_u"], **kw)
    checks = {
        "random_mean_at_least_T": bool(low.mean() >= dur.min_random),
        "fixed_mean_floor": bool(fix.mean() >= dur.min_fixed),
        "steeper_slope_shorter": bool(high.mean() < low.mean()),
    }
    return CartpoleOutcome(seed, actor, learned, info, score, low, high, fix, checks, trace)


def cartpole_experiment(seed: int, balance, ldcbf_cfg, dur: DurationConfig = DurationConfig()) -> list:
    """Attempts in order; a failed attempt is rerun with seed + 1000 up to
    ``dur.retries`` times. The last attempt is the reported one."""
    out = []
    for k in range(dur.retries + 1):
        out.append(cartpole_attempt(seed + 1000 * k, balance, ldcbf_cfg, dur))
        if out[-1].ok:
            break
    return out


@dataclass
class TransferConfig:
    batches: int = 10
    trials: int = 4  # fine-tuning runs per arm and batch
    max_without_final: float = 0.2  # ceiling on the no-barrier success at the last episode
    min_batches_won: int = 9


@dataclass
class TransferResult:
    cfg: TransferConfig
    with_: list  # MoveResult per batch
    without: list

    def cumulative(self):
        w = np.array([r.mean_success.sum() for r in self.with_])
        wo = np.array([r.mean_success.sum() for r in self.without])
        return w, wo

    @property
    def batches_won(self) -> int:
        w, wo = self.cumulative()
        return int(np.count_nonzero(w > wo))

    @property
    def without_final(self) -> float:
        return float(np.mean([r.mean_success[-1] for r in self.without]))

    @property
    def ok(self) -> bool:
        return self.batches_won >= self.cfg.min_batches_won and self.without_final <= self.cfg.max_without_final

    def mean_curves(self):
        return (np.mean([r.mean_success for r in self.with_], axis=0),
                np.mean([r.mean_success for r in self.without], axis=0))

    def summary(self) -> dict:
        w, wo = self.cumulative()
        cw, cwo = self.mean_curves()
        return {"batches_won": self.batches_won, "batches": len(w), "without_final_success": self.without_final,
                "cumulative_with": w.tolist(), "cumulative_without": wo.tolist(),
                "mean_success_with": cw.tolist(), "mean_success_without": cwo.tolist()}

    def table(self) -> str:
        cw, cwo = self.mean_curves()
        lines = ["episode  with   without"]
        lines += [f"{k + 1:<8d} {a:<6.2f} {b:.2f}" for k, (a, b) in enumerate(zip(cw, cwo))]
        lines.append(f"batches where the barrier run succeeds more often: {self.batches_won}/{len(self.with_)}; "
                     f"no-barrier success at the last episode {self.without_final:.2f}")
        return "\n".join(lines)

    def episode_rows(self) -> list:
        rows = []
        for b, (rw, rwo) in enumerate(zip(self.with_, self.without)):
            for arm, r in (("with_ldcbf", rw), ("without_ldcbf", rwo)):
                for ep, tr, s, d, sl in r.rows:
                    rows.append((b, arm, ep, tr, s, d, sl))
        return rows

    def mean_rows(self) -> list:
        cw, cwo = self.mean_curves()
        return [(k + 1, a, b) for k, (a, b) in enumerate(zip(cw, cwo))]


def transfer_experiment(actor, learned, move_cfg, tcfg: TransferConfig, seed: int) -> TransferResult:
    """Both arms start from ``actor``; batch b uses the same derived seed
    for the two arms."""
    from dataclasses import replace

    from .trainer import run_move_task

    with_, without = [], []
    for b in range(tcfg.batches):
        cfg = replace(move_cfg, seed=seed * 100 + b)
        with_.append(run_move_task(actor, True, cfg, tcfg.trials, learned))
        without.append(run_move_task(actor, False, cfg, tcfg.trials))
    return TransferResult(tcfg, with_, without)
