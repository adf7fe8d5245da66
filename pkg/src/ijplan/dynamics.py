"""Agent motion models (unicycle for vehicles/cyclists, double integrator for
pedestrians), forward-Euler stepping, analytic linearization, and linearized
state/input bound rows ``G_x x + G_u u <= g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    v: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(float(self.psi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.psi])


@dataclass(frozen=True)
class VehicleInput:
    accel: float
    yaw_rate: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.yaw_rate])


@dataclass(frozen=True)
class PedestrianState:
    x: float
    y: float
    vx: float
    vy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])


@dataclass(frozen=True)
class PedestrianInput:
    ax: float
    ay: float

    def as_array(self) -> np.ndarray:
        return np.array([self.ax, self.ay])


@dataclass(frozen=True)
class DynamicLimits:
    v_min: float = 0.0
    v_max: float = 15.0
    a_y_max: float = 4.0
    a_x_min: float = -6.0
    a_x_max: float = 3.0
    delta_max: float = 0.6
    wheelbase: float = 2.7
    ped_v_max: float = 2.5
    ped_a_max: float = 2.0

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("need v_min < v_max")
        if not self.a_x_min < 0.0 < self.a_x_max:
            raise ValueError("need a_x_min < 0 < a_x_max")
        for name in ("a_y_max", "delta_max", "wheelbase", "ped_v_max", "ped_a_max"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def max_yaw_rate_per_speed(self) -> float:
        return self.delta_max / self.wheelbase


@dataclass(frozen=True)
class LinearDynamics:
    """x+ = A x + B u + C; C absorbs the linearization defect so the rollout
    of the linear model from its own linearization point is exact."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


def step_vehicle(s: VehicleState, u: VehicleInput, dt: float) -> VehicleState:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return VehicleState(
        x=s.x + s.v * math.cos(s.psi) * dt,
        y=s.y + s.v * math.sin(s.psi) * dt,
        v=s.v + u.accel * dt,
        psi=s.psi + u.yaw_rate * dt,
    )


def step_pedestrian(s: PedestrianState, u: PedestrianInput, dt: float) -> PedestrianState:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return PedestrianState(
        x=s.x + s.vx * dt,
        y=s.y + s.vy * dt,
        vx=s.vx + u.ax * dt,
        vy=s.vy + u.ay * dt,
    )


def linearize_vehicle(s: VehicleState, u: VehicleInput, dt: float) -> LinearDynamics:
    """Analytic Jacobians of the vehicle update about (s, u)."""
    c, si = math.cos(s.psi), math.sin(s.psi)
    A = np.array(
        [
            [1.0, 0.0, c * dt, -s.v * si * dt],
            [0.0, 1.0, si * dt, s.v * c * dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    B = np.array([[0.0, 0.0], [0.0, 0.0], [dt, 0.0], [0.0, dt]])
    nxt = step_vehicle(s, u, dt).as_array()
    C = nxt - A @ s.as_array() - B @ u.as_array()
    return LinearDynamics(A=A, B=B, C=C)


def linearize_pedestrian(dt: float) -> LinearDynamics:
    """The double integrator is already linear; C is exactly zero."""
    A = np.array(
        [
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    B = np.array([[0.0, 0.0], [0.0, 0.0], [dt, 0.0], [0.0, dt]])
    return LinearDynamics(A=A, B=B, C=np.zeros(4))


def rollout_vehicle(x0: np.ndarray, inputs: np.ndarray, dt: float) -> np.ndarray:
    """Roll (T, 2) inputs from a (4,) state; returns (T+1, 4) states."""
    inputs = np.asarray(inputs, dtype=float)
    states = np.empty((len(inputs) + 1, 4))
    states[0] = x0
    s = VehicleState(*x0)
    for t, (a, w) in enumerate(inputs):
        s = step_vehicle(s, VehicleInput(a, w), dt)
        states[t + 1] = s.as_array()
    return states


def rollout_pedestrian(x0: np.ndarray, inputs: np.ndarray, dt: float) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    states = np.empty((len(inputs) + 1, 4))
    states[0] = x0
    s = PedestrianState(*x0)
    for t, (ax, ay) in enumerate(inputs):
        s = step_pedestrian(s, PedestrianInput(ax, ay), dt)
        states[t + 1] = s.as_array()
    return states


@dataclass(frozen=True)
class LimitRows:
    """Linear bound rows G_x x + G_u u <= g at one linearization point."""

    G_x: np.ndarray
    G_u: np.ndarray
    g: np.ndarray


def _octagon_rows(align_angle: float, bound: float, dims: tuple[int, int], n_vars: int):
    """Inscribed regular-octagon rows for ||w|| <= bound on two state dims.

    One polygon vertex is aligned with ``align_angle`` so the linearization
    point itself is never cut off; the polygon is an inner approximation of
    the disc (apothem bound*cos(pi/8), vertices exactly on the circle).
    """
    n_sides = 8
    apothem = bound * math.cos(math.pi / n_sides)
    face_angles = align_angle + (2.0 * np.arange(n_sides) + 1.0) * math.pi / n_sides
    G = np.zeros((n_sides, n_vars))
    G[:, dims[0]] = np.cos(face_angles)
    G[:, dims[1]] = np.sin(face_angles)
    g = np.full(n_sides, apothem)
    return G, g


def vehicle_limit_rows(
    s: VehicleState, u: VehicleInput, limits: DynamicLimits, include_state_bounds: bool = True
) -> LimitRows:
    """Speed, acceleration, lateral-acceleration and steering rows.

    The bilinear bound |v * yaw_rate| <= a_y_max is linearized about the
    current (v, yaw_rate); the steering bound |yaw_rate| <= (delta_max/l) v
    is linear already on forward-driving linearization trajectories.
    """
    v_bar, w_bar = s.v, u.yaw_rate
    k = limits.max_yaw_rate_per_speed
    rows_x, rows_u, rhs = [], [], []

    if include_state_bounds:
        rows_x += [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, -1.0, 0.0]]
        rows_u += [[0.0, 0.0], [0.0, 0.0]]
        rhs += [limits.v_max, -limits.v_min]

    rows_x += [[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
    rows_u += [[1.0, 0.0], [-1.0, 0.0]]
    rhs += [limits.a_x_max, -limits.a_x_min]

    # |v w| <= a_y_max, first-order in (v, w):  w_bar v + v_bar w - v_bar w_bar <= a_y_max
    rows_x += [[0.0, 0.0, w_bar, 0.0], [0.0, 0.0, -w_bar, 0.0]]
    rows_u += [[0.0, v_bar], [0.0, -v_bar]]
    rhs += [limits.a_y_max + v_bar * w_bar, limits.a_y_max - v_bar * w_bar]

    # +-w <= k v  (v >= 0 on the linearization trajectory)
    rows_x += [[0.0, 0.0, -k, 0.0], [0.0, 0.0, -k, 0.0]]
    rows_u += [[0.0, 1.0], [0.0, -1.0]]
    rhs += [0.0, 0.0]

    return LimitRows(
        G_x=np.array(rows_x), G_u=np.array(rows_u), g=np.array(rhs)
    )


def pedestrian_limit_rows(
    s: PedestrianState, limits: DynamicLimits, include_state_bounds: bool = True
) -> LimitRows:
    """Octagonal inner approximations of the velocity and acceleration norm bounds."""
    align = math.atan2(s.vy, s.vx) if math.hypot(s.vx, s.vy) > 1e-9 else 0.0
    blocks_x, blocks_u, rhs = [], [], []
    if include_state_bounds:
        G_v, g_v = _octagon_rows(align, limits.ped_v_max, (2, 3), 4)
        blocks_x.append(G_v)
        blocks_u.append(np.zeros((len(g_v), 2)))
        rhs.append(g_v)
    G_a, g_a = _octagon_rows(align, limits.ped_a_max, (0, 1), 2)
    blocks_x.append(np.zeros((len(g_a), 4)))
    blocks_u.append(G_a)
    rhs.append(g_a)
    return LimitRows(
        G_x=np.vstack(blocks_x), G_u=np.vstack(blocks_u), g=np.concatenate(rhs)
    )


def linearized_limits(state, u, limits: DynamicLimits) -> LimitRows:
    """Dispatch on agent kind; vehicles need the linearization input for the
    bilinear lateral-acceleration rows."""
    if isinstance(state, VehicleState):
        return vehicle_limit_rows(state, u, limits)
    if isinstance(state, PedestrianState):
        return pedestrian_limit_rows(state, limits)
    raise TypeError(f"unsupported state type {type(state)!r}")
