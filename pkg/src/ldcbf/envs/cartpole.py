"""Frictionless cart-pole (Barto-style equations), pole angle measured from
upright. State order is (p, p_dot, psi, psi_dot); the control is a force in
units of ``force_scale`` newtons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ControlAffineModel

TRACK = 3.8


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.8
    force_scale: float = 10.0

    def __post_init__(self):
        if min(self.cart_mass, self.pole_mass, self.half_length, self.force_scale) <= 0:
            raise ValueError("masses, length and force scale must be positive")

    @property
    def total_mass(self) -> float:
        return self.cart_mass + self.pole_mass


@dataclass(frozen=True)
class CartPoleState:
    p: float
    p_dot: float
    psi: float
    psi_dot: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.p, self.p_dot, self.psi, self.psi_dot)):
            raise ValueError("non-finite cart-pole state")

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.p_dot, self.psi, self.psi_dot])

    @classmethod
    def from_array(cls, x) -> "CartPoleState":
        return cls(*(float(v) for v in np.asarray(x).ravel()[:4]))


def _split(x):
    x = np.asarray(x, dtype=float)
    return x[..., 0], x[..., 1], x[..., 2], x[..., 3]


def cartpole_model(params: CartPoleParams = CartPoleParams()) -> ControlAffineModel:
    """xdot = f(x) + g(x) u; both accept a single state or a (N, 4) batch."""
    M = params.total_mass
    mp, l, grav, fs = params.pole_mass, params.half_length, params.gravity, params.force_scale

    def denom(c):
        return l * (4.0 / 3.0 - mp * c * c / M)

    def f(x):
        _, pd, psi, w = _split(x)
        s, c = np.sin(psi), np.cos(psi)
        temp = mp * l * w * w * s / M
        acc_psi = (grav * s - c * temp) / denom(c)
        acc_p = temp - mp * l * acc_psi * c / M
        return np.stack([pd, acc_p, w, acc_psi], axis=-1)

    def g(x):
        _, _, psi, _ = _split(x)
        c = np.cos(psi)
        gp = -c * (fs / M) / denom(c)
        ga = fs / M - mp * l * gp * c / M
        col = np.stack([np.zeros_like(c), ga, np.zeros_like(c), gp], axis=-1)
        return col[..., None]

    lo = np.array([-TRACK, -10.0, -math.pi, -20.0])
    return ControlAffineModel(4, 1, f, g, lo, -lo)


def cartpole_energy(x, params: CartPoleParams = CartPoleParams()) -> float:
    """Kinetic plus potential energy of cart and uniform pole."""
    _, pd, psi, w = _split(x)
    M, mp, l = params.total_mass, params.pole_mass, params.half_length
    return (0.5 * M * pd**2 + mp * l * pd * w * np.cos(psi) + (2.0 / 3.0) * mp * l * l * w**2
            + mp * params.gravity * l * np.cos(psi))


# feature scalings (sin psi, k p_dot, k psi_dot)
BALANCE_SCALING = 0.1
LDCBF_SCALING = 1.0


def cartpole_features(s, scaling: float = LDCBF_SCALING) -> np.ndarray:
    """(sin psi, scaling * p_dot, scaling * psi_dot); accepts a state object,
    an array (4,) or a batch (N, 4)."""
    x = s.as_array() if isinstance(s, CartPoleState) else np.asarray(s, dtype=float)
    _, pd, psi, w = _split(x)
    return np.stack([np.sin(psi), scaling * pd, scaling * w], axis=-1)


def cartpole_features_jacobian(x, scaling: float = LDCBF_SCALING) -> np.ndarray:
    """d features / d state, shape (N, 3, 4) for a batch."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    J = np.zeros((len(X), 3, 4))
    J[:, 0, 2] = np.cos(X[:, 2])
    J[:, 1, 1] = scaling
    J[:, 2, 3] = scaling
    return J


COS_FALL = 0.2


def ldcbf_cost(s, cos_threshold: float = COS_FALL) -> float:
    """1.0 once the pole is past the angle threshold, 0.1 otherwise."""
    x = s.as_array() if isinstance(s, CartPoleState) else np.asarray(s, dtype=float)
    return 1.0 if math.cos(float(x[2])) < cos_threshold else 0.1


def tolerance(z, lo: float, hi: float, margin: float = 0.0, k: float = 1.9096):
    """1 inside [lo, hi]; outside, exp(-1/2 (k d / margin)^2) with d the
    distance past the nearer bound (0 when margin is 0)."""
    z = np.asarray(z, dtype=float)
    d = np.where(z < lo, lo - z, np.where(z > hi, z - hi, 0.0))
    if margin <= 0:
        out = np.where(d > 0, 0.0, 1.0)
    else:
        out = np.exp(-0.5 * (k * d / margin) ** 2)
    return out if out.ndim else float(out)


def move_reward(s) -> float:
    """Reward for moving the cart left with the pole up."""
    x = s.as_array() if isinstance(s, CartPoleState) else np.asarray(s, dtype=float)
    upright = (1.0 + math.cos(float(x[2]))) / 2.0
    return upright * float(tolerance(x[1] + 1.0, -2.0, 0.0, margin=0.5))


def balance_reward(s, u=0.0) -> float:
    """Upright, centred, slow and low-effort, each in [0, 1]."""
    x = s.as_array() if isinstance(s, CartPoleState) else np.asarray(s, dtype=float)
    upright = (1.0 + math.cos(float(x[2]))) / 2.0
    centered = (1.0 + float(tolerance(x[0], -0.25, 0.25, margin=2.0))) / 2.0
    small_u = (4.0 + float(tolerance(float(np.ravel(u)[0]), 0.0, 0.0, margin=1.0))) / 5.0
    small_w = (1.0 + float(tolerance(x[3], 0.0, 0.0, margin=5.0))) / 2.0
    return upright * centered * small_u * small_w
