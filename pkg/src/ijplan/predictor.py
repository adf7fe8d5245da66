"""Unconditioned trajectory prediction behind a single pluggable interface,
with built-in kinematic predictors, nearest-distance EC / non-EC agent
classification, and dummy-agent padding that keeps the joint QP at a fixed
agent count.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    PedestrianState,
    VehicleState,
    rollout_pedestrian,
    rollout_vehicle,
)
from .geometry import Disc, OrientedBox, Polyline, project_to_polyline, wrap_angle
from .homotopy import DiscreteTrajectory


class EmptySceneError(RuntimeError):
    pass


class AgentKind(str, enum.Enum):
    VEHICLE = "vehicle"
    CYCLIST = "cyclist"
    PEDESTRIAN = "pedestrian"


class PredictorKind(str, enum.Enum):
    CONSTANT_VELOCITY = "constant_velocity"
    CONSTANT_TURN_RATE = "constant_turn_rate"
    LANE_FOLLOW = "lane_follow"


@dataclass(frozen=True)
class Agent:
    agent_id: str
    kind: AgentKind
    state: VehicleState | PedestrianState
    footprint: OrientedBox | Disc
    history: DiscreteTrajectory | None = None


@dataclass(frozen=True)
class SceneSnapshot:
    """Input to one planning cycle: ego, agents with histories, lane graph."""

    ego_state: VehicleState
    ego_footprint: OrientedBox
    agents: tuple[Agent, ...]
    lanes: object = None  # routing.LaneGraph or None
    timestamp: float = 0.0

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        object.__setattr__(self, "agents", tuple(self.agents))

    def agent_by_id(self, agent_id: str) -> Agent:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)


@dataclass(frozen=True)
class JointPrediction:
    """Scene-centric prediction: each sample maps agent id to a trajectory of
    ``horizon/dt`` future waypoints at the planner's time step."""

    samples: tuple[dict[str, DiscreteTrajectory], ...]
    horizon: float
    dt: float

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class AgentPartition:
    ec_ids: tuple[str, ...]
    non_ec_ids: tuple[str, ...]
    n_dummy_ec: int
    n_dummy_nonec: int

    @property
    def dummies(self) -> int:
        return self.n_dummy_ec + self.n_dummy_nonec


def _agent_speed_heading(agent: Agent) -> tuple[float, float]:
    if isinstance(agent.state, VehicleState):
        return agent.state.v, agent.state.psi
    speed = math.hypot(agent.state.vx, agent.state.vy)
    heading = math.atan2(agent.state.vy, agent.state.vx) if speed > 1e-9 else 0.0
    return speed, heading


def _estimated_yaw_rate(agent: Agent, dt: float) -> float:
    hist = agent.history
    if hist is None or len(hist) < 2:
        return 0.0
    return wrap_angle(hist.headings[-1] - hist.headings[-2]) / hist.dt


def _future_from_states(states: np.ndarray, dt: float, agent_id: str) -> DiscreteTrajectory:
    """Drop the current state; keep the horizon/dt future waypoints."""
    xy = states[1:, 0:2]
    return DiscreteTrajectory.from_xy(xy, dt=dt, agent_id=agent_id)


def _predict_lane_follow(agent, speed, lanes, n_steps, dt):
    """Follow the nearest lane centerline at the current speed, decaying the
    initial lateral offset; falls back to constant velocity off the map."""
    if lanes is None or not getattr(lanes, "lanes", None):
        return None
    pos = np.array([agent.state.x, agent.state.y])
    best = None
    for lane_id in sorted(lanes.lanes):
        lane = lanes.lanes[lane_id]
        proj = project_to_polyline(pos, lane.centerline)
        if best is None or abs(proj.signed_lateral) < abs(best[1].signed_lateral):
            best = (lane_id, proj)
    lane_id, proj = best
    if abs(proj.signed_lateral) > 6.0:
        return None
    _, lane_heading = lanes.lanes[lane_id].centerline.point_at(proj.arclength)
    _, agent_heading = _agent_speed_heading(agent)
    if abs(wrap_angle(agent_heading - lane_heading)) > math.pi / 3.0:
        return None  # crossing/oncoming traffic is not following this lane

    states = np.empty((n_steps + 1, 4))
    line, s, lateral = lanes.lanes[lane_id].centerline, proj.arclength, proj.signed_lateral
    states[0] = [pos[0], pos[1], speed, 0.0]
    for t in range(1, n_steps + 1):
        s += speed * dt
        while s > line.total_length:
            nxt = [i for i in lanes.lanes[lane_id].successors if i in lanes.lanes]
            if not nxt:
                break
            s -= line.total_length
            lane_id = sorted(nxt)[0]
            line = lanes.lanes[lane_id].centerline
        decay = math.exp(-t * dt / 1.0)
        p, hd = line.point_at(s, extrapolate=True)
        normal = np.array([-math.sin(hd), math.cos(hd)])
        xy = p + lateral * decay * normal
        states[t] = [xy[0], xy[1], speed, hd]
    return states


def predict(
    scene: SceneSnapshot,
    model: PredictorKind,
    horizon: float = 3.0,
    dt: float = 0.15,
    n_samples: int = 4,
    seed: int = 0,
) -> JointPrediction:
    """Joint unconditioned prediction; deterministic given (scene, model, seed).

    Sample 0 is the unperturbed kinematic rollout; later samples perturb the
    initial heading and speed with a seeded generator for diversity. An empty
    scene yields an empty (not failing) prediction.
    """
    n_steps = int(round(horizon / dt))
    if n_steps < 2:
        raise ValueError("horizon must span at least 2 steps")
    rng = np.random.default_rng(seed)
    samples: list[dict[str, DiscreteTrajectory]] = [dict() for _ in range(n_samples)]
    for agent in sorted(scene.agents, key=lambda a: a.agent_id):
        speed, heading = _agent_speed_heading(agent)
        for j in range(n_samples):
            if j == 0:
                d_heading, speed_factor = 0.0, 1.0
            else:
                d_heading = float(rng.normal(0.0, 0.03))
                speed_factor = float(1.0 + rng.normal(0.0, 0.06))
            spd = max(speed * speed_factor, 0.0)
            hd = heading + d_heading
            states = None
            if agent.kind is AgentKind.PEDESTRIAN:
                vel = spd * np.array([math.cos(hd), math.sin(hd)]) if spd > 1e-12 else np.zeros(2)
                x0 = np.array([agent.state.x, agent.state.y, vel[0], vel[1]])
                states = rollout_pedestrian(x0, np.zeros((n_steps, 2)), dt)
            elif model is PredictorKind.LANE_FOLLOW:
                states = _predict_lane_follow(agent, spd, scene.lanes, n_steps, dt)
            if states is None:
                yaw_rate = (
                    _estimated_yaw_rate(agent, dt)
                    if model is PredictorKind.CONSTANT_TURN_RATE
                    else 0.0
                )
                x0 = np.array([agent.state.x, agent.state.y, spd, hd])
                inputs = np.column_stack([np.zeros(n_steps), np.full(n_steps, yaw_rate)])
                states = rollout_vehicle(x0, inputs, dt)
            samples[j][agent.agent_id] = _future_from_states(states, dt, agent.agent_id)
    return JointPrediction(samples=tuple(samples), horizon=horizon, dt=dt)


def align_prediction(pred: JointPrediction, horizon: float, dt: float) -> JointPrediction:
    """Resample a prediction (linear interpolation) onto the planner's grid."""
    if abs(pred.dt - dt) < 1e-12 and pred.horizon >= horizon - 1e-9:
        return pred
    if pred.horizon < horizon - 1e-9:
        raise ValueError("prediction horizon shorter than planning horizon")
    n_new = int(round(horizon / dt))
    samples = []
    for sample in pred.samples:
        out = {}
        for agent_id, traj in sample.items():
            t_old = (1 + np.arange(len(traj))) * pred.dt
            t_new = (1 + np.arange(n_new)) * dt
            xy = np.column_stack(
                [np.interp(t_new, t_old, traj.xy[:, 0]), np.interp(t_new, t_old, traj.xy[:, 1])]
            )
            out[agent_id] = DiscreteTrajectory.from_xy(xy, dt=dt, agent_id=agent_id)
        samples.append(out)
    return JointPrediction(samples=tuple(samples), horizon=horizon, dt=dt)


def classify_agents(
    scene: SceneSnapshot, prediction: JointPrediction, n_ec: int, n_nonec: int
) -> AgentPartition:
    """Sort agents by minimum predicted distance to the ego's current position;
    the nearest become EC, the next tier non-EC, the rest are ignored, and
    shortfalls are padded with dummy slots."""
    if n_ec < 0 or n_nonec < 0:
        raise ValueError("agent counts must be nonnegative")
    ego = scene.ego_state.as_array()[0:2]
    ranked = []
    for agent in scene.agents:
        d = math.hypot(agent.state.x - ego[0], agent.state.y - ego[1])
        for sample in prediction.samples:
            traj = sample.get(agent.agent_id)
            if traj is not None:
                d = min(d, float(np.linalg.norm(traj.xy - ego, axis=1).min()))
        ranked.append((d, agent.agent_id))
    ranked.sort()
    ids = [agent_id for _, agent_id in ranked]
    ec = tuple(ids[:n_ec])
    nonec = tuple(ids[n_ec : n_ec + n_nonec])
    return AgentPartition(
        ec_ids=ec,
        non_ec_ids=nonec,
        n_dummy_ec=n_ec - len(ec),
        n_dummy_nonec=n_nonec - len(nonec),
    )


DUMMY_DISTANCE = 1.0e4
DUMMY_SPACING = 100.0
DUMMY_RADIUS = 0.1


def make_dummy(slot: int, horizon: float = 3.0, dt: float = 0.15):
    """A stationary far-away padding agent whose constraints are vacuous.

    Returns (state, footprint, prediction trajectory). Slots sit on a line
    10^4 m from the scene origin, 100 m apart, so dummies never interact with
    the scene or each other.
    """
    x = DUMMY_DISTANCE
    y = DUMMY_SPACING * slot
    state = PedestrianState(x=x, y=y, vx=0.0, vy=0.0)
    footprint = Disc(center=(x, y), radius=DUMMY_RADIUS)
    n_steps = int(round(horizon / dt))
    xy = np.tile([x, y], (n_steps, 1))
    traj = DiscreteTrajectory.from_xy(xy, dt=dt, agent_id=f"dummy_{slot}")
    return state, footprint, traj
