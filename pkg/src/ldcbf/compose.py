"""Union of limited-duration safe sets via the pointwise minimum of barriers,
with a switching policy that follows the member of smallest B."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ControlAffineModel, Ldcbf
from .errors import MismatchedConstants
from .value_learn import (
    GridInterpolant,
    LearnedLdcbf,
    NodeSweep,
    Scaled,
    ValueTrainConfig,
    collect_rollouts,
    extract_ldcbf,
    gamma_from_beta,
    train_value,
)


@dataclass(frozen=True)
class MinComposite:
    """min_j B_j over members sharing (L, beta, T). Nonsmooth where the
    active member changes."""

    members: tuple

    @property
    def L(self):
        return self.members[0].L

    @property
    def beta(self):
        return self.members[0].beta

    @property
    def T(self):
        return self.members[0].T

    @property
    def level(self) -> float:
        return self.members[0].level

    @property
    def threshold(self) -> float:
        return self.members[0].threshold

    def values(self, x) -> np.ndarray:
        return np.array([m.value(x) for m in self.members])

    def value(self, x) -> float:
        return float(np.min(self.values(x)))

    def active(self, x) -> int:
        # argmin returns the first minimizer, so ties go to the lowest index
        return int(np.argmin(self.values(x)))

    def gradient(self, x) -> np.ndarray:
        return self.members[self.active(x)].gradient(x)

    def in_safe_set(self, x) -> bool:
        return self.value(x) < self.level

    def in_initial_set(self, x) -> bool:
        return self.value(x) <= self.threshold

    def as_ldcbf(self) -> Ldcbf:
        """Ldcbf view using the active member's gradient (not smooth in general)."""
        m = self.members[0]
        return Ldcbf(self.value, self.gradient, m.L, m.beta, m.T, m.alpha)


def min_compose(members: Sequence[Ldcbf]) -> MinComposite:
    members = tuple(members)
    if not members:
        raise ValueError("need at least one member")
    ref = members[0]
    for m in members[1:]:
        if not np.allclose([m.L, m.beta, m.T], [ref.L, ref.beta, ref.T], rtol=1e-12, atol=0):
            raise MismatchedConstants("members must share L, beta and T")
    return MinComposite(members)


def switching_policy(composite: MinComposite, member_policies: Sequence[Callable]) -> Callable:
    if len(member_policies) != len(composite.members):
        raise ValueError("need one policy per member")
    policies = list(member_policies)

    def policy(x):
        return policies[composite.active(x)](x)

    return policy


@dataclass
class RelearnConfig:
    grid_lo: Sequence[float]
    grid_hi: Sequence[float]
    grid_shape: Sequence[int]
    ell_in: float = 0.05
    episodes: int = 500
    steps: int = 50
    iters: int = 3000
    tol: float = 1e-8
    seed: int = 0
    init_sampler: Optional[Callable] = None  # default sweeps every grid node


@dataclass
class RelearnResult:
    ldcbf: LearnedLdcbf
    n_initial_learned: int
    n_initial_composite: int
    shrinkage: float  # learned / composite initial-set grid counts


def relearn_union_ldcbf(
    composite: MinComposite,
    model: ControlAffineModel,
    dt: float,
    cfg: RelearnConfig,
    policy: Callable,
) -> RelearnResult:
    """Learn one grid-based LDCBF for the union under ``policy`` (typically
    the switching policy), with cost L outside the union and ``ell_in``
    inside."""
    L, beta = composite.L, composite.beta
    grid = GridInterpolant(cfg.grid_lo, cfg.grid_hi, cfg.grid_shape)
    nodes = grid.nodes()
    safe = composite.in_safe_set

    def cost(x):
        return cfg.ell_in if safe(x) else L

    sampler = cfg.init_sampler
    if sampler is None:
        sampler = NodeSweep(nodes)

    buf = collect_rollouts(model, policy, sampler, dt, cfg.steps, cfg.episodes, safe, cfg.seed, cost)
    gamma = gamma_from_beta(beta, dt)
    tcfg = ValueTrainConfig(gamma=gamma, L=L, minibatch=None, soft_mu=1.0, iters=cfg.iters, step=1.0,
                            seed=cfg.seed, tol=cfg.tol)
    train_value(buf, grid, grid.copy(), tcfg)
    inside = np.array([safe(x) for x in nodes])
    if not inside.any() or inside.all():
        raise ValueError("grid must contain both safe and unsafe nodes")
    v = Scaled(grid, dt)
    learned = extract_ldcbf(v, model, policy, beta, composite.T, nodes[inside], nodes[~inside],
                            composite.members[0].alpha)
    n_comp = int(sum(composite.in_initial_set(x) for x in nodes))
    n_learn = int(np.count_nonzero(learned.in_initial_set(nodes)))
    return RelearnResult(learned, n_learn, n_comp, n_learn / max(n_comp, 1))
