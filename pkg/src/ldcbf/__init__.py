"""Limited-duration control barrier functions: safety filtering, learning
barriers from value functions, composition, and a stochastic variant."""

__version__ = "0.1.0"
