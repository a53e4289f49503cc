"""Cart-pole plant: closed-form dynamics, Euler stepping, task predicate,
and mid-rollout disturbances (cart-mass change, observation corruption).

The equations of motion are the classic cart-pole ones with theta = 0
upright; angles are kept wrapped to (-pi, pi]. Force is clamped to
``force_limit`` inside :func:`step`; :func:`derivatives` deliberately does
not clamp so trajectory optimizers can differentiate through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "CartPoleState",
    "CartPoleParams",
    "DisturbanceSchedule",
    "derivatives",
    "derivatives_array",
    "step",
    "step_array",
    "is_success",
    "apply_disturbance",
    "encode_observation",
    "observation_dim",
    "random_hanging_state",
    "wrap_angle",
    "SUCCESS_X_BOUND",
    "SUCCESS_ANGLE_BOUND",
]

SUCCESS_X_BOUND = 2.4
SUCCESS_ANGLE_BOUND = 15.0 * math.pi / 180.0


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]; in-range values pass
    through bit-unchanged."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return np.where((theta > np.pi) | (theta <= -np.pi), wrapped, theta)


@dataclass(frozen=True)
class CartPoleState:
    """Full plant state; theta is measured from upright (rad, wrapped)."""

    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0

    def __post_init__(self):
        values = (self.x, self.x_dot, self.theta, self.theta_dot)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite cart-pole state {values}")
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    @staticmethod
    def from_array(values) -> "CartPoleState":
        x, x_dot, theta, theta_dot = (float(v) for v in values)
        return CartPoleState(x, x_dot, theta, theta_dot)


@dataclass(frozen=True)
class CartPoleParams:
    """Plant parameters; defaults match the common simulator values."""

    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    gravity: float = 9.8
    force_limit: float = 10.0
    dt: float = 0.02

    def __post_init__(self):
        if self.cart_mass <= 0:
            raise ValueError("cart_mass must be > 0")
        if self.pole_mass < 0:
            raise ValueError("pole_mass must be >= 0")
        if self.pole_half_length <= 0:
            raise ValueError("pole_half_length must be > 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.force_limit <= 0:
            raise ValueError("force_limit must be > 0")


@dataclass(frozen=True)
class DisturbanceSchedule:
    """What changes at step ``trigger_step`` and onward.

    kind is one of "none", "mass_change", "observation_corruption".
    Mass change swaps the cart mass of the true plant; observation
    corruption maps the policy observation o -> scale * o + offset
    (componentwise) while the plant itself is untouched.
    """

    trigger_step: int = 0
    kind: str = "none"
    new_cart_mass: float | None = None
    offset: tuple[float, ...] = field(default=())
    scale: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.trigger_step < 0:
            raise ValueError("trigger_step must be >= 0")
        if self.kind not in ("none", "mass_change", "observation_corruption"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "mass_change":
            if self.new_cart_mass is None or self.new_cart_mass <= 0:
                raise ValueError("mass_change requires new_cart_mass > 0")


def derivatives_array(states: np.ndarray, forces: np.ndarray, params: CartPoleParams) -> np.ndarray:
    """State derivative (xdot, xddot, thetadot, thetaddot) for batched input.

    ``states`` has shape (..., 4), ``forces`` shape (...,). No clamping.
    """
    states = np.asarray(states, dtype=float)
    forces = np.asarray(forces, dtype=float)
    x_dot = states[..., 1]
    theta = states[..., 2]
    theta_dot = states[..., 3]

    total_mass = params.cart_mass + params.pole_mass
    pole_ml = params.pole_mass * params.pole_half_length
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)

    temp = (forces + pole_ml * theta_dot**2 * sin_t) / total_mass
    theta_acc = (params.gravity * sin_t - cos_t * temp) / (
        params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos_t**2 / total_mass)
    )
    x_acc = temp - pole_ml * theta_acc * cos_t / total_mass

    out = np.empty(np.broadcast(x_dot, forces).shape + (4,))
    out[..., 0] = x_dot
    out[..., 1] = x_acc
    out[..., 2] = theta_dot
    out[..., 3] = theta_acc
    return out


def derivatives(state: CartPoleState, force: float, params: CartPoleParams) -> np.ndarray:
    """State derivative at a single state. Force is used as given (unclamped)."""
    return derivatives_array(state.as_array(), np.asarray(float(force)), params)


def step_array(states: np.ndarray, forces: np.ndarray, params: CartPoleParams) -> np.ndarray:
    """One explicit-Euler step with force clamped to +-force_limit; wraps theta."""
    forces = np.clip(forces, -params.force_limit, params.force_limit)
    nxt = np.asarray(states, dtype=float) + params.dt * derivatives_array(states, forces, params)
    nxt[..., 2] = wrap_angle(nxt[..., 2])
    return nxt


def step(state: CartPoleState, force: float, params: CartPoleParams) -> CartPoleState:
    return CartPoleState.from_array(step_array(state.as_array(), np.asarray(float(force)), params))


def is_success(state: CartPoleState) -> bool:
    """Task success: cart within the track bounds and pole within 15 degrees."""
    return (
        -SUCCESS_X_BOUND < state.x < SUCCESS_X_BOUND
        and abs(state.theta) < SUCCESS_ANGLE_BOUND
    )


def apply_disturbance(
    params: CartPoleParams,
    observation: np.ndarray,
    schedule: DisturbanceSchedule,
    t: int,
) -> tuple[CartPoleParams, np.ndarray]:
    """Apply the schedule at step t; identity before trigger_step or for kind none."""
    if t < 0:
        raise ValueError("step index must be >= 0")
    if schedule.kind == "none" or t < schedule.trigger_step:
        return params, observation
    if schedule.kind == "mass_change":
        return replace(params, cart_mass=schedule.new_cart_mass), observation
    obs = np.asarray(observation, dtype=float)
    scale = np.ones_like(obs) if len(schedule.scale) == 0 else np.asarray(schedule.scale, dtype=float)
    offset = np.zeros_like(obs) if len(schedule.offset) == 0 else np.asarray(schedule.offset, dtype=float)
    if scale.shape != obs.shape or offset.shape != obs.shape:
        raise ValueError(
            f"corruption vectors must match the observation length {obs.shape[0]}"
        )
    return params, scale * obs + offset


def observation_dim(encoding: str) -> int:
    if encoding == "sincos":
        return 5
    if encoding == "raw":
        return 4
    raise ValueError(f"unknown observation encoding {encoding!r}")


def encode_observation(state_array: np.ndarray, encoding: str = "sincos") -> np.ndarray:
    """Policy observation for a state array of shape (..., 4).

    "sincos" replaces theta with (sin theta, cos theta) so the +-pi wrap
    does not masquerade as a novel input; "raw" passes the state through.
    """
    state_array = np.asarray(state_array, dtype=float)
    if encoding == "raw":
        return state_array.copy()
    if encoding != "sincos":
        raise ValueError(f"unknown observation encoding {encoding!r}")
    theta = state_array[..., 2]
    out = np.empty(state_array.shape[:-1] + (5,))
    out[..., 0] = state_array[..., 0]
    out[..., 1] = state_array[..., 1]
    out[..., 2] = np.sin(theta)
    out[..., 3] = np.cos(theta)
    out[..., 4] = state_array[..., 3]
    return out


def random_hanging_state(rng: np.random.Generator) -> CartPoleState:
    """Swing-up initial condition: pole hanging down with small jitter."""
    theta = np.pi + rng.uniform(-0.1, 0.1)
    x, x_dot, theta_dot = rng.uniform(-0.05, 0.05, size=3)
    return CartPoleState(float(x), float(x_dot), float(theta), float(theta_dot))
