"""Spline-lattice ego trajectory sampling, reward scoring, and deduplication
of (ego sample, prediction sample) pairs into one representative per
free-end-homotopy mode vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DynamicLimits, VehicleInput, VehicleState, step_vehicle
from .geometry import Disc, OrientedBox, Polyline, project_to_polyline, wrap_angle
from .homotopy import (
    CoincidentPointsError,
    DiscreteTrajectory,
    HomotopyConfig,
    ModeVector,
    mode_vector,
)
from .predictor import JointPrediction
from .routing import Reference


class DegenerateReferenceError(ValueError):
    pass


class NoValidCandidateError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleLattice:
    lateral_offsets: tuple[float, ...] = (-3.5, -1.75, 0.0, 1.75, 3.5)
    terminal_speeds: tuple[float, ...] = (5.0, 10.0, 12.0)
    horizon: float = 3.0
    dt: float = 0.15

    def __post_init__(self):
        if not self.lateral_offsets or not self.terminal_speeds:
            raise ValueError("lattice axes must be nonempty")


def default_lattice(
    speed: float, limits: DynamicLimits, horizon: float = 3.0, dt: float = 0.15
) -> SampleLattice:
    """Offsets at half-lane spacing; terminal speeds scaled off the current
    one, always including a stopping option so an emergency-braking
    initialization exists."""
    v = max(speed, 1.0)
    speeds = []
    for factor in (0.0, 0.5, 1.0, 1.2):
        s = min(max(v * factor, limits.v_min), limits.v_max)
        if all(abs(s - o) > 0.25 for o in speeds):
            speeds.append(s)
    return SampleLattice(
        lateral_offsets=(-3.5, -1.75, 0.0, 1.75, 3.5),
        terminal_speeds=tuple(speeds),
        horizon=horizon,
        dt=dt,
    )


@dataclass
class ScoredSample:
    """A dynamically feasible rollout (satisfies the vehicle update exactly)
    plus its prediction-independent reward part."""

    trajectory: DiscreteTrajectory
    inputs: np.ndarray  # (T, 2)
    reward: float
    feasible: bool
    lateral_offset: float
    terminal_speed: float


@dataclass(frozen=True)
class RewardWeights:
    tracking: float = 1.0
    collision: float = 10.0
    collision_margin: float = 1.0
    comfort: float = 0.1


def _spline_coeffs(s0, l0, slope0, s1, l1):
    """Cubic l(s) with l(s0)=l0, l'(s0)=slope0, l(s1)=l1, l'(s1)=0."""
    h = s1 - s0
    a = l0
    b = slope0
    c = (3.0 * (l1 - l0) - (2.0 * slope0) * h) / h**2
    d = (-2.0 * (l1 - l0) + slope0 * h) / h**3
    return a, b, c, d, s0, s1


def _spline_eval(coeffs, s):
    a, b, c, d, s0, s1 = coeffs
    ds = min(max(s, s0), s1) - s0
    return a + b * ds + c * ds**2 + d * ds**3


def footprint_radius(footprint) -> float:
    if isinstance(footprint, OrientedBox):
        return math.hypot(footprint.half_length, footprint.half_width)
    if isinstance(footprint, Disc):
        return footprint.radius
    return 1.0


def sample_ego(
    scene,
    reference: Reference,
    lattice: SampleLattice,
    limits: DynamicLimits | None = None,
) -> list[ScoredSample]:
    """One rollout per (lateral offset, terminal speed) cell.

    Each sample tracks a cubic lateral spline along the reference with a
    feedback controller driving the exact vehicle update, so the dynamic
    recursion holds with zero residual. Samples whose rollout violates the
    lateral-acceleration bound are dropped.
    """
    limits = limits or DynamicLimits()
    if len(reference.trajectory) < 2:
        raise DegenerateReferenceError("reference must contain at least 2 points")
    center = reference.centerline
    ego = scene.ego_state
    T = int(round(lattice.horizon / lattice.dt))
    dt = lattice.dt

    proj0 = project_to_polyline(np.array([ego.x, ego.y]), center)
    _, ref_heading0 = center.point_at(proj0.arclength)
    slope0 = math.tan(np.clip(wrap_angle(ego.psi - ref_heading0), -1.2, 1.2))

    # clamp lattice offsets to the drivable corridor at the reference terminus
    offset_lo, offset_hi = -math.inf, math.inf
    if reference.boundaries:
        half_width = 1.0
        fp = getattr(scene, "ego_footprint", None)
        if isinstance(fp, OrientedBox):
            half_width = fp.half_width
        left, right = reference.boundaries[-1]
        p_end = reference.trajectory.xy[-1]
        room_left = -project_to_polyline(p_end, left).signed_lateral
        room_right = project_to_polyline(p_end, right).signed_lateral
        offset_hi = room_left - half_width - 0.2
        offset_lo = -(room_right - half_width - 0.2)

    yaw_gain = 1.8
    out: list[ScoredSample] = []
    for offset in lattice.lateral_offsets:
        if not (offset_lo - 1e-9 <= offset <= offset_hi + 1e-9) and offset != 0.0:
            continue
        for v_goal in lattice.terminal_speeds:
            v_goal = min(max(v_goal, limits.v_min), limits.v_max)
            progress = max(0.5 * (ego.v + v_goal) * lattice.horizon, 6.0)
            coeffs = _spline_coeffs(
                proj0.arclength, proj0.signed_lateral, slope0,
                proj0.arclength + progress, offset,
            )
            state = ego
            states = np.empty((T + 1, 4))
            states[0] = state.as_array()
            inputs = np.empty((T, 2))
            ok = True
            for t in range(T):
                v_des = ego.v + (v_goal - ego.v) * min(1.0, (t + 1) / T)
                accel = float(np.clip((v_des - state.v) / dt, limits.a_x_min, limits.a_x_max))
                proj = project_to_polyline(np.array([state.x, state.y]), center)
                lookahead = max(3.0, 0.8 * state.v)
                s_la = proj.arclength + lookahead
                p_la, hd_la = center.point_at(s_la, extrapolate=True)
                l_la = _spline_eval(coeffs, s_la)
                target = p_la + l_la * np.array([-math.sin(hd_la), math.cos(hd_la)])
                err = wrap_angle(
                    math.atan2(target[1] - state.y, target[0] - state.x) - state.psi
                )
                w_max = limits.max_yaw_rate_per_speed * max(state.v, 0.1)
                yaw_rate = float(np.clip(yaw_gain * err, -w_max, w_max))
                state = step_vehicle(state, VehicleInput(accel, yaw_rate), dt)
                states[t + 1] = state.as_array()
                inputs[t] = (accel, yaw_rate)
                if abs(states[t][2] * yaw_rate) > limits.a_y_max + 1e-9:
                    ok = False
                    break
            if not ok:
                continue
            traj = DiscreteTrajectory(
                xy=states[:, 0:2], headings=states[:, 3], dt=dt,
                agent_id="ego", speeds=states[:, 2],
            )
            reward = -_tracking_cost(traj, reference) - _comfort_cost(inputs, dt)
            out.append(
                ScoredSample(
                    trajectory=traj, inputs=inputs, reward=reward, feasible=True,
                    lateral_offset=offset, terminal_speed=v_goal,
                )
            )
    return out


def _tracking_cost(traj: DiscreteTrajectory, reference: Reference,
                   weights: RewardWeights = RewardWeights()) -> float:
    n = min(len(traj), len(reference.trajectory))
    err = traj.xy[:n] - reference.trajectory.xy[:n]
    return weights.tracking * float(np.einsum("ij,ij->", err, err)) / n


def _comfort_cost(inputs: np.ndarray, dt: float,
                  weights: RewardWeights = RewardWeights()) -> float:
    if len(inputs) == 0:
        return 0.0
    accel = inputs[:, 0]
    yaw = inputs[:, 1]
    cost = float(np.mean(accel**2) + np.mean(yaw**2))
    if len(accel) > 1:
        cost += 0.01 * float(np.mean((np.diff(accel) / dt) ** 2))
        cost += 0.01 * float(np.mean((np.diff(yaw) / dt) ** 2))
    return weights.comfort * cost


def _collision_cost(
    traj: DiscreteTrajectory,
    prediction_sample: dict[str, DiscreteTrajectory],
    footprints: dict[str, object] | None,
    ego_radius: float,
    weights: RewardWeights = RewardWeights(),
) -> float:
    cost = 0.0
    ego_xy = traj.xy[1:]  # aligned with the prediction's future-only waypoints
    for agent_id in sorted(prediction_sample):
        other = prediction_sample[agent_id]
        n = min(len(ego_xy), len(other))
        dist = np.linalg.norm(ego_xy[:n] - other.xy[:n], axis=1)
        radius = ego_radius + (
            footprint_radius(footprints[agent_id]) if footprints and agent_id in footprints else 1.0
        )
        gap = float(dist.min()) - radius
        hinge = max(0.0, weights.collision_margin - gap)
        cost += weights.collision * hinge * hinge
    return cost


def score_sample(
    sample: ScoredSample,
    prediction_sample: dict[str, DiscreteTrajectory],
    reference: Reference,
    footprints: dict[str, object] | None = None,
    ego_radius: float = 1.5,
    weights: RewardWeights = RewardWeights(),
) -> float:
    """Reward = -(tracking + collision hinge + comfort); higher is better."""
    return -(
        _tracking_cost(sample.trajectory, reference, weights)
        + _collision_cost(sample.trajectory, prediction_sample, footprints, ego_radius, weights)
        + _comfort_cost(sample.inputs, sample.trajectory.dt, weights)
    )


@dataclass(frozen=True)
class HomotopyCandidate:
    """One representative per (mode vector, prediction sample): an ego sample,
    the joint prediction sample it was classified against, and its reward."""

    ego_init: DiscreteTrajectory
    ego_inputs: np.ndarray
    agents_pred: dict[str, DiscreteTrajectory]
    prediction_index: int
    mode_vector: ModeVector
    reward: float


def select_candidates(
    samples: list[ScoredSample],
    prediction: JointPrediction,
    config: HomotopyConfig,
    k_max: int,
    reference: Reference,
    ec_ids: tuple[str, ...] | None = None,
    footprints: dict[str, object] | None = None,
    ego_radius: float = 1.5,
) -> list[HomotopyCandidate]:
    """Group every (ego sample, prediction sample) pair by its mode vector over
    the EC agents, keep the argmax-reward member per group, and return the
    top k_max groups by reward."""
    if not samples or not prediction.samples:
        raise NoValidCandidateError("no samples or prediction available")
    groups: dict[tuple, tuple[float, ScoredSample, int, ModeVector]] = {}
    n_pairs = 0
    n_degenerate = 0
    for j, pred_sample in enumerate(prediction.samples):
        ids = ec_ids if ec_ids is not None else tuple(sorted(pred_sample))
        obstacles = [pred_sample[i] for i in ids if i in pred_sample]
        for sample in samples:
            n_pairs += 1
            ego_future = DiscreteTrajectory(
                xy=sample.trajectory.xy[1:],
                headings=sample.trajectory.headings[1:],
                dt=sample.trajectory.dt,
                agent_id="ego",
            ) if obstacles else sample.trajectory
            try:
                h = mode_vector(ego_future, obstacles, config)
            except CoincidentPointsError:
                n_degenerate += 1
                continue
            reward = score_sample(
                sample, pred_sample, reference, footprints, ego_radius
            )
            key = (h.modes, j)
            if key not in groups or reward > groups[key][0]:
                groups[key] = (reward, sample, j, h)
    if not groups:
        raise NoValidCandidateError(
            f"all {n_degenerate}/{n_pairs} pairs were degenerate"
        )
    ranked = sorted(groups.values(), key=lambda item: -item[0])
    out = []
    for reward, sample, j, h in ranked[:k_max]:
        out.append(
            HomotopyCandidate(
                ego_init=sample.trajectory,
                ego_inputs=sample.inputs,
                agents_pred=dict(prediction.samples[j]),
                prediction_index=j,
                mode_vector=h,
                reward=reward,
            )
        )
    return out
