"""Deterministic actor-critic training on the cart-pole, optionally shaped by
a learned barrier through a log-barrier penalty on stored half-spaces.

Actor output is tanh-squashed into [-1, 1]. The critic receives the action
at its second layer.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import AlphaFn, ControlAffineModel, make_rng, rk4_step, spawn_seeds
from .envs.cartpole import (
    BALANCE_SCALING,
    COS_FALL,
    LDCBF_SCALING,
    cartpole_features_jacobian,
    ldcbf_cost,
    TRACK,
    CartPoleParams,
    balance_reward,
    cartpole_features,
    cartpole_model,
    move_reward,
)
from .errors import DivergenceError, Infeasible
from .filter import ldcbf_halfspace, project_box_halfspace_batch
from .nn import Adam, Mlp, Momentum, soft_update
from .qp import AffineIneqSet, QpProblem, solve_qp
from .value_learn import (
    Featurized,
    LearnedLdcbf,
    MlpApproximator,
    Scaled,
    ValueTrainConfig,
    beta_gamma_convert,
    collect_rollouts,
    extract_ldcbf,
    hjb_residuals,
    train_value,
)

__all__ = [
    "Mlp",
    "TrainConfig",
    "CartPoleTask",
    "CartPoleEnv",
    "log_barrier_extension",
    "log_barrier_extension_grad",
    "projected_update",
    "ddpg_train",
    "evaluate",
    "run_move_task",
    "balance_task",
    "move_task",
    "make_actor",
    "make_critic",
    "act",
    "DdpgAgent",
    "write_metrics_csv",
    "train_balance",
    "pole_only_task",
    "LdcbfLearnConfig",
    "learn_cartpole_ldcbf",
    "filtered_durations",
    "actor_policy",
    "balance_defaults",
    "move_defaults",
]

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Log-barrier extension


def log_barrier_extension(z, t: float):
    """Smooth surrogate of the indicator of z <= 0, finite for every z."""
    if t <= 0:
        raise ValueError("t must be positive")
    z = np.asarray(z, dtype=float)
    knee = -1.0 / t**2
    inside = z <= knee
    zs = np.where(inside, z, -1.0)  # keep log() away from non-negative z
    out = np.where(inside, -np.log(-zs) / t, t * z - math.log(1.0 / t**2) / t + 1.0 / t)
    return out if out.ndim else float(out)


def log_barrier_extension_grad(z, t: float):
    z = np.asarray(z, dtype=float)
    knee = -1.0 / t**2
    zs = np.where(z <= knee, z, -1.0)
    out = np.where(z <= knee, -1.0 / (t * zs), t)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Projected gradient step for linear policies


@dataclass
class ProjectionResult:
    theta: np.ndarray
    projected: bool  # False when the constraint intersection was infeasible


def projected_update(theta, grad, halfspaces: Sequence, step: float) -> ProjectionResult:
    """Ascent step theta + step * grad, then Euclidean projection onto
    {theta : a_i^T theta <= c_i}. Infeasible constraints leave the step
    unprojected and report it."""
    theta = np.asarray(theta, dtype=float)
    raw = theta + step * np.asarray(grad, dtype=float)
    if not halfspaces:
        return ProjectionResult(raw, True)
    A = np.array([np.asarray(a, dtype=float).ravel() for a, _ in halfspaces])
    c = np.array([float(cc) for _, cc in halfspaces])
    try:
        u, _ = solve_qp(QpProblem(np.eye(raw.size), -raw, AffineIneqSet(A, c), None))
    except Infeasible:
        log.warning("projection constraints infeasible; returning the raw step")
        return ProjectionResult(raw, False)
    return ProjectionResult(u, True)


# ---------------------------------------------------------------------------
# Tasks and environment


@dataclass
class CartPoleTask:
    name: str
    reward: Callable  # (x, u) -> float
    init: Callable  # rng -> x
    cos_threshold: float = 0.75
    p_threshold: float = TRACK
    steps: int = 300
    dt: float = 0.01
    success: Optional[Callable] = None  # (final x, fell) -> bool
    goal: Optional[Callable] = None  # x -> bool; if set, success means reaching it before a fall

    def fell(self, x) -> bool:
        return math.cos(float(x[2])) < self.cos_threshold or abs(float(x[0])) > self.p_threshold


def _dm_init(rng, psi_range):
    """Small random cart state with psi uniform in +-psi_range."""
    return np.array([0.01 * rng.standard_normal(), 0.01 * rng.standard_normal(),
                     rng.uniform(-psi_range, psi_range), 0.01 * rng.standard_normal()])


def balance_task(p_threshold: float = 1.8, steps: int = 300, psi_range: float = 0.1) -> CartPoleTask:
    return CartPoleTask(
        "balance",
        lambda x, u: balance_reward(x, u),
        lambda rng: _dm_init(rng, psi_range),
        cos_threshold=0.75,
        p_threshold=p_threshold,
        steps=steps,
        success=lambda x, fell: not fell,
    )


MOVE_GOAL = -1.8


def move_task(steps: int = 300) -> CartPoleTask:
    return CartPoleTask(
        "move",
        lambda x, u: move_reward(x),
        lambda rng: _dm_init(rng, 0.5),
        cos_threshold=0.75,
        p_threshold=TRACK,
        steps=steps,
        goal=lambda x: float(x[0]) <= MOVE_GOAL,
    )


class CartPoleEnv:
    def __init__(self, task: CartPoleTask, params: CartPoleParams = CartPoleParams()):
        self.task = task
        self.model = cartpole_model(params)
        self.x = None
        self.reached = False

    def reset(self, rng) -> np.ndarray:
        self.x = np.asarray(self.task.init(rng), dtype=float)
        self.reached = False
        return self.x.copy()

    def step(self, u):
        u = np.clip(np.atleast_1d(np.asarray(u, dtype=float)), -1.0, 1.0)
        r = float(self.task.reward(self.x, u))
        self.x = rk4_step(self.model, self.x, u, self.task.dt)
        fell = self.task.fell(self.x)
        if self.task.goal is not None and not fell and self.task.goal(self.x):
            self.reached = True
        return self.x.copy(), r, fell

    def succeeded(self, fell: bool) -> bool:
        if self.task.goal is not None:
            return self.reached
        return bool(self.task.success(self.x, fell)) if self.task.success else not fell


# ---------------------------------------------------------------------------
# DDPG


@dataclass
class TrainConfig:
    gamma: float = 0.99
    steps: int = 300
    episodes: int = 80
    minibatch: int = 64
    mu: float = 1e-3
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "momentum"  # or "adam"
    critic_optimizer: Optional[str] = None  # defaults to ``optimizer``
    preact_penalty: float = 0.0  # weight on mean squared pre-tanh actor output
    seed: int = 10
    buffer: int = 100_000
    warmup: int = 256  # transitions stored before updates start
    noise_start: float = 0.2
    noise_end: float = 0.02
    noise_rho: float = 0.0  # AR(1) correlation of the exploration noise per step
    input_scale: float = 10.0  # fixed input normalization inside actor and critic
    critic_init: float = 0.0  # initial critic output, e.g. the return of never terminating
    actor_hidden: tuple = (64, 48)
    critic_hidden: tuple = (64, 48)
    obs_scaling: float = BALANCE_SCALING
    barrier_t: float = 5.0
    barrier_weight: float = 1.0
    alpha_slope: float = 0.1
    horizon_T: float = 5.0
    filter_exploration: bool = False
    divergence: float = 1e6
    updates_per_step: int = 4


@dataclass
class EpisodeMetrics:
    episode: int
    ret: float
    duration_s: float
    success: bool
    mean_slack: float
    critic_loss: float
    violation_rate: float  # fraction of steps whose action broke the stored half-space


def make_actor(cfg: TrainConfig, rng) -> Mlp:
    return Mlp([3, *cfg.actor_hidden, 1], rng, in_scale=cfg.input_scale)


def make_critic(cfg: TrainConfig, rng) -> Mlp:
    net = Mlp([3, *cfg.critic_hidden, 1], rng, extra_in=1, inject_at=1, in_scale=cfg.input_scale)
    net.b[-1][...] += cfg.critic_init
    return net


def act(actor: Mlp, obs) -> np.ndarray:
    return np.tanh(actor.forward(obs))


def _opt(cfg: TrainConfig, lr, kind=None):
    kind = kind or cfg.optimizer
    if kind not in ("adam", "momentum"):
        raise ValueError(f"unknown optimizer {kind!r}")
    return Adam(lr) if kind == "adam" else Momentum(lr, cfg.momentum)


class _Replay:
    def __init__(self, cap):
        self.cap = cap
        self.n = 0
        self.i = 0
        self.S = np.zeros((cap, 3))
        self.A = np.zeros((cap, 1))
        self.R = np.zeros(cap)
        self.S2 = np.zeros((cap, 3))
        self.D = np.zeros(cap)
        self.Ca = np.zeros((cap, 1))  # stored constraint a
        self.Cc = np.zeros(cap)  # stored constraint c

    def add(self, s, a, r, s2, d, ca, cc):
        i = self.i
        self.S[i], self.A[i], self.R[i], self.S2[i], self.D[i], self.Ca[i], self.Cc[i] = s, a, r, s2, d, ca, cc
        self.i = (i + 1) % self.cap
        self.n = min(self.n + 1, self.cap)

    def sample(self, rng, k):
        j = rng.integers(0, self.n, k)
        return self.S[j], self.A[j], self.R[j], self.S2[j], self.D[j], self.Ca[j], self.Cc[j]


class DdpgAgent:
    """Actor, critic, their targets, optimizers and replay."""

    def __init__(self, actor: Mlp, critic: Mlp, cfg: TrainConfig):
        self.cfg = cfg
        self.actor, self.critic = actor, critic
        self.actor_t, self.critic_t = actor.copy(), critic.copy()
        self.actor_opt = _opt(cfg, cfg.actor_lr)
        self.critic_opt = _opt(cfg, cfg.critic_lr, cfg.critic_optimizer)
        self.replay = _Replay(cfg.buffer)
        self.last_loss = 0.0

    def update(self, rng, constrained: bool):
        cfg = self.cfg
        S, A, R, S2, D, Ca, Cc = self.replay.sample(rng, cfg.minibatch)
        N = len(R)
        a2 = np.tanh(self.actor_t.forward(S2))
        y = R + cfg.gamma * (1.0 - D) * self.critic_t.forward(S2, a2)[:, 0]
        q = self.critic.forward(S, A, cache=True)[:, 0]
        err = q - y
        loss = float(np.mean(err**2))
        if not math.isfinite(loss) or loss > cfg.divergence:
            raise DivergenceError(f"critic loss {loss:.3g} (|q| max {np.max(np.abs(q)):.3g})")
        gc, _, _ = self.critic.backward((2.0 / N) * err[:, None])
        self.critic_opt.step(self.critic.params, gc)

        pre = self.actor.forward(S, cache=True)
        a = np.tanh(pre)
        self.critic.forward(S, a, cache=True)
        _, _, dA = self.critic.backward(np.full((N, 1), -1.0 / N))  # d(-mean Q)/da
        if constrained:
            z = np.sum(Ca * a, axis=1) - Cc
            dA = dA + (cfg.barrier_weight / N) * log_barrier_extension_grad(z, cfg.barrier_t)[:, None] * Ca
        dpre = dA * (1.0 - a * a)
        if cfg.preact_penalty:
            dpre = dpre + (2.0 * cfg.preact_penalty / N) * pre
        ga, _, _ = self.actor.backward(dpre)
        self.actor_opt.step(self.actor.params, ga)

        soft_update(self.actor_t.params, self.actor.params, cfg.mu)
        soft_update(self.critic_t.params, self.critic.params, cfg.mu)
        self.last_loss = loss
        return loss


def _constraint(barrier, model: ControlAffineModel, x):
    hs = ldcbf_halfspace(barrier, model, x)
    return hs.a, hs.c


def ddpg_train(
    env: CartPoleEnv,
    actor: Mlp,
    critic: Mlp,
    cfg: TrainConfig,
    constraint: Optional[LearnedLdcbf] = None,
    agent: Optional[DdpgAgent] = None,
    episode_hook: Optional[Callable] = None,
):
    """Train for ``cfg.episodes`` episodes.

    With ``constraint`` the half-space of the barrier condition is stored
    with every transition and the actor loss gains
    ``barrier_weight * mean(log_barrier_extension(a^T pi(s) - c, t))``.
    ``episode_hook(k, agent)`` runs after each episode and may return extra
    metrics. Returns (actor, critic, list of EpisodeMetrics).
    """
    rng = make_rng(cfg.seed)
    agent = agent or DdpgAgent(actor, critic, cfg)
    barrier = None
    if constraint is not None:
        barrier = constraint.ldcbf.with_alpha(AlphaFn(cfg.alpha_slope)).with_horizon(cfg.horizon_T)
    lo, hi = np.array([-1.0]), np.array([1.0])
    metrics = []
    for ep in range(cfg.episodes):
        frac = ep / max(cfg.episodes - 1, 1)
        sigma = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac
        x = env.reset(rng)
        ret, slacks, viol, steps, fell = 0.0, [], 0, 0, False
        noise = sigma * rng.standard_normal(1)
        innov = math.sqrt(1.0 - cfg.noise_rho**2)
        for k in range(cfg.steps):
            s = cartpole_features(x, cfg.obs_scaling)
            if k:
                noise = cfg.noise_rho * noise + sigma * innov * rng.standard_normal(1)
            u = np.clip(act(agent.actor, s) + noise, -1.0, 1.0)
            ca, cc = np.zeros(1), 0.0
            if barrier is not None:
                ca, cc = _constraint(barrier, env.model, x)
                if cfg.filter_exploration:
                    uu, sl = project_box_halfspace_batch(u[None], ca[None], np.array([cc]), lo, hi)
                    u = uu[0]
                    slacks.append(float(sl[0]))
                viol += float(ca @ u) > cc + 1e-9
            x2, r, fell = env.step(u)
            agent.replay.add(s, u, r, cartpole_features(x2, cfg.obs_scaling), float(fell), ca, cc)
            ret += r
            steps = k + 1
            if agent.replay.n >= max(cfg.warmup, cfg.minibatch):
                for _ in range(cfg.updates_per_step):
                    agent.update(rng, barrier is not None)
            x = x2
            if fell:
                break
        m = EpisodeMetrics(
            ep + 1,
            ret,
            steps * env.task.dt,
            env.succeeded(fell),
            float(np.mean(slacks)) if slacks else 0.0,
            agent.last_loss,
            viol / max(steps, 1),
        )
        metrics.append(m)
        if episode_hook is not None:
            episode_hook(ep + 1, agent)
    return agent.actor, agent.critic, metrics


def evaluate(actor: Mlp, task: CartPoleTask, seed, trials: int = 10, steps: Optional[int] = None,
             obs_scaling: float = BALANCE_SCALING, params: CartPoleParams = CartPoleParams(), barrier=None):
    """Noise-free rollouts, filtered through ``barrier`` (an Ldcbf) when
    given. Returns (durations_s, successes)."""
    env = CartPoleEnv(task, params)
    steps = steps or task.steps
    lo, hi = np.array([-1.0]), np.array([1.0])
    durs, succ = [], []
    for ss in spawn_seeds(seed, trials):
        rng = make_rng(ss)
        x = env.reset(rng)
        fell = False
        k = 0
        for k in range(steps):
            u = act(actor, cartpole_features(x, obs_scaling))
            if barrier is not None:
                a, c = _constraint(barrier, env.model, x)
                uu, _ = project_box_halfspace_batch(u[None], a[None], np.array([c]), lo, hi)
                u = uu[0]
            x, _, fell = env.step(u)
            if fell:
                break
        durs.append((k + 1) * task.dt)
        succ.append(env.succeeded(fell))
    return np.array(durs), np.array(succ)


def pole_only_task(steps: int = 1000, cos_threshold: float = 0.75, psi_range: float = 0.1) -> CartPoleTask:
    """Balance evaluation where only a falling pole ends the run."""
    return replace(balance_task(math.inf, steps, psi_range), cos_threshold=cos_threshold)


def train_balance(cfg: TrainConfig, eval_every: int = 5, eval_trials: int = 3, eval_steps: int = 1000,
                  params: CartPoleParams = CartPoleParams()):
    """DDPG on the balance task keeping the snapshot whose greedy rollouts
    hold the pole longest (ties go to the later snapshot).

    Returns (best actor, critic, metrics, best mean evaluation duration).
    """
    rng = make_rng(cfg.seed)
    actor, critic = make_actor(cfg, rng), make_critic(cfg, rng)
    env = CartPoleEnv(balance_task(steps=cfg.steps), params)
    probe = pole_only_task(eval_steps)
    best = {"score": -1.0, "params": actor.params.copy()}

    def hook(ep, agent):
        if ep % eval_every and ep != cfg.episodes:
            return
        d, _ = evaluate(agent.actor, probe, cfg.seed + 1, eval_trials, eval_steps, cfg.obs_scaling, params)
        if d.mean() >= best["score"]:
            best["score"] = float(d.mean())
            best["params"] = agent.actor.params.copy()

    _, critic, metrics = ddpg_train(env, actor, critic, cfg, episode_hook=hook)
    out = actor.copy()
    out.set_params(best["params"])
    return out, critic, metrics, best["score"]


@dataclass
class MoveResult:
    success: np.ndarray  # (trials, episodes) 0/1
    rows: list = field(default_factory=list)  # metrics CSV rows

    @property
    def mean_success(self) -> np.ndarray:
        return self.success.mean(axis=0)


def run_move_task(
    actor_init: Mlp,
    with_ldcbf: bool,
    cfg: TrainConfig,
    trials: int = 10,
    ldcbf: Optional[LearnedLdcbf] = None,
    params: CartPoleParams = CartPoleParams(),
) -> MoveResult:
    """Fine-tune ``actor_init`` on the move task for up to ``cfg.episodes``
    episodes per trial; after each episode the greedy policy is rolled out
    once and scored for success. With the barrier, that rollout runs
    through the safety filter, as does exploration when
    ``cfg.filter_exploration`` is set."""
    if with_ldcbf and ldcbf is None:
        raise ValueError("with_ldcbf needs a learned barrier")
    task = move_task(cfg.steps)
    seeds = spawn_seeds(cfg.seed, trials)
    barrier = None
    if with_ldcbf:
        barrier = ldcbf.ldcbf.with_alpha(AlphaFn(cfg.alpha_slope)).with_horizon(cfg.horizon_T)
    succ = np.zeros((trials, cfg.episodes))
    rows = []
    for tr, ss in enumerate(seeds):
        init_rng, eval_seed, train_seed = ss.spawn(3)
        critic = make_critic(cfg, make_rng(init_rng))
        actor = actor_init.copy()
        env = CartPoleEnv(task, params)
        tcfg = replace(cfg, seed=train_seed)

        def hook(ep, agent, tr=tr, eval_seed=eval_seed):
            d, s = evaluate(agent.actor, task, eval_seed, 1, cfg.steps, cfg.obs_scaling, params, barrier)
            succ[tr, ep - 1] = float(s[0])
            hook.durations.append(float(d[0]))

        hook.durations = []
        _, _, metrics = ddpg_train(env, actor, critic, tcfg, ldcbf if with_ldcbf else None, episode_hook=hook)
        for m, d in zip(metrics, hook.durations):
            rows.append((m.episode, tr, int(succ[tr, m.episode - 1]), d, m.mean_slack))
    return MoveResult(succ, rows)


# ---------------------------------------------------------------------------
# Learning an LDCBF from a balancing actor


@dataclass
class LdcbfLearnConfig:
    gamma: float = 0.999
    dt: float = 0.01
    L: float = 1.0
    T: float = 5.0
    episodes: int = 200
    steps: int = 300
    hidden: tuple = (64, 48)
    iters: int = 40_000
    step: float = 1e-3
    optimizer: str = "adam"
    minibatch: int = 64
    pos_per_batch: int = 32
    soft_mu: float = 1e-2
    psi_range: float = 1.5
    pd_scale: float = 100.0  # multiplies the small random cart velocity
    w_scale: float = 200.0  # multiplies the small random pole rate
    seed: int = 10
    offset_quantile: Optional[float] = None  # see extract_ldcbf
    n_check: int = 5000  # safe samples used for the residual statistics


def _ldcbf_init(rng, cfg: LdcbfLearnConfig):
    return np.array([0.01 * rng.standard_normal(), cfg.pd_scale * 0.01 * rng.standard_normal(),
                     rng.uniform(-cfg.psi_range, cfg.psi_range), cfg.w_scale * 0.01 * rng.standard_normal()])


def actor_policy(actor: Mlp, obs_scaling: float = BALANCE_SCALING):
    """State -> control (1,) for a trained actor; also accepts (N, 4)."""

    def policy(x):
        return np.tanh(actor.forward(cartpole_features(x, obs_scaling)))

    return policy


def learn_cartpole_ldcbf(actor: Mlp, cfg: LdcbfLearnConfig = LdcbfLearnConfig(),
                         params: CartPoleParams = CartPoleParams(), obs_scaling: float = BALANCE_SCALING):
    """Value of the actor on the frozen-outside-C system, cost 1 once
    cos psi < 0.2 and 0.1 before, turned into an LDCBF over
    (sin psi, p_dot, psi_dot).

    The network regresses discounted sums divided by L / (1 - gamma) and
    starts at the value of never leaving C. Returns (LearnedLdcbf, info).
    """
    rng = make_rng(cfg.seed)
    s_collect, s_net, s_train, s_check = rng.spawn(4)
    model = cartpole_model(params)
    policy = actor_policy(actor, obs_scaling)
    beta = beta_gamma_convert(cfg.gamma, cfg.dt)

    def safe(x):
        return math.cos(float(x[2])) >= COS_FALL

    buf = collect_rollouts(model, policy, lambda r: _ldcbf_init(r, cfg), cfg.dt, cfg.steps, cfg.episodes,
                           safe, s_collect, ldcbf_cost)
    scale = cfg.L / (1.0 - cfg.gamma)
    mlp = Mlp([3, *cfg.hidden, 1], make_rng(s_net))
    mlp.b[-1][...] = 0.1 / (1.0 - cfg.gamma) / scale

    def feats(X):
        return cartpole_features(X, LDCBF_SCALING)

    def jac(X):
        return cartpole_features_jacobian(X, LDCBF_SCALING)

    local = Featurized(Scaled(MlpApproximator(mlp, optimizer=cfg.optimizer), scale), feats, jac)
    vcfg = ValueTrainConfig(gamma=cfg.gamma, L=cfg.L, minibatch=cfg.minibatch, pos_per_batch=cfg.pos_per_batch,
                            soft_mu=cfg.soft_mu, iters=cfg.iters, step=cfg.step, seed=s_train)
    train_value(buf, local, local.copy(), vcfg)
    v = Scaled(local, cfg.dt)

    X, _, _, Xn, ok = buf.all()
    inside = np.cos(X[:, 2]) >= COS_FALL
    safe_x = X[inside]
    unsafe_x = np.concatenate([Xn[~ok], X[~inside]])
    # sin psi is one-to-one only on |psi| <= pi/2
    unsafe_x = unsafe_x[np.abs(unsafe_x[:, 2]) <= math.pi / 2]
    pick = make_rng(s_check).choice(len(safe_x), min(cfg.n_check, len(safe_x)), replace=False)
    safe_x = safe_x[pick]
    learned = extract_ldcbf(v, model, policy, beta, cfg.T, safe_x, unsafe_x,
                            offset_quantile=cfg.offset_quantile)
    ell = hjb_residuals(v, model, policy, safe_x, beta)
    info = {
        "td_residual": float(local.td_residual),
        "n_positive": buf.n_positive,
        "n_negative": buf.n_negative,
        "ell_min": float(ell.min()),
        "ell_p05": float(np.quantile(ell, 0.05)),
        "ell_median": float(np.median(ell)),
        "beta": beta,
    }
    return learned, info


def filtered_durations(ldcbf: LearnedLdcbf, nominal: Callable, alpha_slope: float, T: float, seed,
                       trials: int = 10, steps: int = 1000, dt: float = 0.01, psi_range: float = 0.1,
                       params: CartPoleParams = CartPoleParams(), trace: Optional[list] = None) -> np.ndarray:
    """Seconds until cos psi < 0.2 (capped at steps * dt) for ``nominal(x, rng)``
    filtered through the barrier with alpha(q) = max(alpha_slope q, 0).

    ``trace`` collects rows (trial, t, p, p_dot, psi, psi_dot, u_nom, u, B, slack)."""
    model = cartpole_model(params)
    b = ldcbf.ldcbf.with_alpha(AlphaFn(alpha_slope)).with_horizon(T)
    lo, hi = np.array([-1.0]), np.array([1.0])
    out = []
    for tr, ss in enumerate(spawn_seeds(seed, trials)):
        rng = make_rng(ss)
        x = _dm_init(rng, psi_range)
        k = 0
        for k in range(steps):
            hs = ldcbf_halfspace(b, model, x)
            u_nom = np.atleast_1d(np.asarray(nominal(x, rng), dtype=float))
            u, sl = project_box_halfspace_batch(u_nom[None], hs.a[None], np.array([hs.c]), lo, hi)
            if trace is not None:
                trace.append((tr, k * dt, *x, u_nom[0], u[0, 0], float(b.value(x)), float(sl[0])))
            x = rk4_step(model, x, u[0], dt)
            if math.cos(float(x[2])) < COS_FALL:
                break
        out.append((k + 1) * dt)
    return np.array(out)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "trial", "success", "duration_s", "mean_slack"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4]))])


def balance_defaults() -> TrainConfig:
    """Balance-task settings used by the runner: long enough that the best
    greedy snapshot reliably holds the pole for the full evaluation."""
    return TrainConfig(episodes=150, warmup=1000)


def move_defaults() -> TrainConfig:
    """Move-task fine-tuning: 15 episodes, long discount, unscaled
    observations (sin psi, p_dot, psi_dot), exploration filtered through the
    barrier when one is supplied."""
    return TrainConfig(gamma=0.999, episodes=15, warmup=1000, filter_exploration=True, obs_scaling=LDCBF_SCALING)
