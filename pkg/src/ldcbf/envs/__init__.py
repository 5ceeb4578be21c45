"""Cart-pole and battery-constrained coverage environments."""

from .cartpole import (
    CartPoleParams,
    CartPoleState,
    cartpole_energy,
    cartpole_features,
    cartpole_model,
    ldcbf_cost,
    move_reward,
    tolerance,
)
from .coverage import (
    CoverageParams,
    CoverageWorld,
    coverage_step,
    energy_ldcbf,
    lloyd_nominal,
    random_world,
    run_coverage,
    voronoi_cells,
)

__all__ = [
    "CartPoleParams",
    "CartPoleState",
    "CoverageParams",
    "CoverageWorld",
    "cartpole_energy",
    "cartpole_features",
    "cartpole_model",
    "coverage_step",
    "energy_ldcbf",
    "ldcbf_cost",
    "lloyd_nominal",
    "move_reward",
    "random_world",
    "run_coverage",
    "tolerance",
    "voronoi_cells",
]
