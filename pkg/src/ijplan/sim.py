"""Deterministic closed-loop 2D driving simulator with scripted and reactive
agents, exact (separating-axis / closest-point) collision detection, and
closed-loop metrics mirroring drivable-area compliance, progress, and
no-at-fault-collision scoring.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    PedestrianInput,
    PedestrianState,
    VehicleInput,
    VehicleState,
    step_pedestrian,
    step_vehicle,
)
from .geometry import Disc, OrientedBox, Polyline, Pose2, project_to_polyline, wrap_angle
from .homotopy import DiscreteTrajectory
from .planner import JointPlan, PlanDiagnostics, PlannerConfig, plan
from .predictor import Agent, AgentKind, SceneSnapshot
from .routing import Lane, LaneGraph, NoRouteFoundError, build_reference, plan_route


class PolicyKind(str, enum.Enum):
    REPLAY = "replay"
    CONSTANT_VELOCITY = "constant_velocity"
    LANE_FOLLOW_REACTIVE = "lane_follow_reactive"


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 10.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    accel_max: float = 2.0
    decel_comfort: float = 3.0
    exponent: float = 4.0


@dataclass(frozen=True)
class AgentPolicy:
    kind: PolicyKind
    trajectory: DiscreteTrajectory | None = None  # REPLAY
    idm: IdmParams | None = None  # LANE_FOLLOW_REACTIVE


@dataclass(frozen=True)
class ScenarioAgent:
    agent_id: str
    kind: AgentKind
    state: VehicleState | PedestrianState
    footprint: OrientedBox | Disc
    policy: AgentPolicy


@dataclass(frozen=True)
class Scenario:
    name: str
    lane_graph: LaneGraph
    ego_state: VehicleState
    ego_footprint: OrientedBox
    v_des: float
    agents: tuple[ScenarioAgent, ...]
    duration: float = 10.0
    sim_dt: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))


# --- exact collision detection (independent of the geometry-module margins) --

def _box_corners(cx, cy, heading, hl, hw) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    ex = np.array([c, s])
    ey = np.array([-s, c])
    ctr = np.array([cx, cy])
    return np.array(
        [
            ctr + hl * ex + hw * ey,
            ctr - hl * ex + hw * ey,
            ctr - hl * ex - hw * ey,
            ctr + hl * ex - hw * ey,
        ]
    )


def boxes_overlap_sat(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test via interval projections on the 4 face axes."""
    ca = _box_corners(a.center.x, a.center.y, a.center.heading, a.half_length, a.half_width)
    cb = _box_corners(b.center.x, b.center.y, b.center.heading, b.half_length, b.half_width)
    for box in (a, b):
        ex, ey = box.axes
        for axis in (ex, ey):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def box_disc_overlap(box: OrientedBox, disc: Disc) -> bool:
    """Closest-point (clamp) test in the box frame."""
    ex, ey = box.axes
    rel = disc.xy - box.center.xy
    dx = float(ex @ rel)
    dy = float(ey @ rel)
    qx = min(max(dx, -box.half_length), box.half_length)
    qy = min(max(dy, -box.half_width), box.half_width)
    return math.hypot(dx - qx, dy - qy) <= disc.radius


def footprints_overlap(fa, fb) -> bool:
    if isinstance(fa, OrientedBox) and isinstance(fb, OrientedBox):
        return boxes_overlap_sat(fa, fb)
    if isinstance(fa, OrientedBox) and isinstance(fb, Disc):
        return box_disc_overlap(fa, fb)
    if isinstance(fa, Disc) and isinstance(fb, OrientedBox):
        return box_disc_overlap(fb, fa)
    return float(np.linalg.norm(fb.xy - fa.xy)) <= fa.radius + fb.radius


def _footprint_at_state(footprint, state) -> OrientedBox | Disc:
    if isinstance(footprint, OrientedBox):
        heading = state.psi if isinstance(state, VehicleState) else 0.0
        return OrientedBox(Pose2(state.x, state.y, heading), footprint.half_length, footprint.half_width)
    return Disc(center=(state.x, state.y), radius=footprint.radius)


# --- world stepping ----------------------------------------------------------

@dataclass
class WorldState:
    step: int
    t: float
    ego: VehicleState
    agents: dict[str, VehicleState | PedestrianState]
    collisions: list[str] = field(default_factory=list)


def _replay_state(traj: DiscreteTrajectory, t: float, fallback) -> VehicleState:
    idx = min(int(round(t / traj.dt)), len(traj) - 1)
    speed = float(traj.speeds[idx]) if traj.speeds is not None else 0.0
    return VehicleState(
        x=float(traj.xy[idx, 0]), y=float(traj.xy[idx, 1]), v=speed,
        psi=float(traj.headings[idx]),
    )


def _idm_accel(v: float, gap: float, dv: float, p: IdmParams) -> float:
    v0 = max(p.desired_speed, 0.1)
    s_star = p.min_gap + max(0.0, v * p.time_headway + v * dv / (2.0 * math.sqrt(p.accel_max * p.decel_comfort)))
    gap = max(gap, 0.1)
    return p.accel_max * (1.0 - (v / v0) ** p.exponent - (s_star / gap) ** 2)


def _reactive_step(
    agent: ScenarioAgent,
    state: VehicleState,
    world: WorldState,
    scenario: Scenario,
    ego_footprint: OrientedBox,
    dt: float,
) -> VehicleState:
    graph = scenario.lane_graph
    hit = graph.nearest_lane(np.array([state.x, state.y]))
    if hit is None:
        return step_vehicle(state, VehicleInput(0.0, 0.0), dt)
    lane_id, proj = hit
    lane = graph.lanes[lane_id]
    my_s = proj.arclength

    # leader search along my lane corridor (other agents and the ego)
    gap = math.inf
    leader_v = 0.0
    others = [("__ego__", world.ego, ego_footprint)]
    for other in scenario.agents:
        if other.agent_id != agent.agent_id:
            others.append((other.agent_id, world.agents[other.agent_id], other.footprint))
    for _, other_state, other_fp in others:
        p = np.array([other_state.x, other_state.y])
        op = project_to_polyline(p, lane.centerline)
        if abs(op.signed_lateral) > 2.0:
            continue
        ds = op.arclength - my_s
        if 0.0 < ds < 80.0:
            half_len = other_fp.half_length if isinstance(other_fp, OrientedBox) else other_fp.radius
            mine = agent.footprint.half_length if isinstance(agent.footprint, OrientedBox) else agent.footprint.radius
            d = ds - half_len - mine
            if d < gap:
                gap = d
                if isinstance(other_state, VehicleState):
                    leader_v = other_state.v
                else:
                    leader_v = math.hypot(other_state.vx, other_state.vy)

    p = agent.policy.idm or IdmParams()
    if math.isinf(gap):
        accel = p.accel_max * (1.0 - (state.v / max(p.desired_speed, 0.1)) ** p.exponent)
    else:
        accel = _idm_accel(state.v, gap, state.v - leader_v, p)
    accel = float(np.clip(accel, -6.0, p.accel_max))

    # lane keeping: aim at a lookahead point on the centerline
    look = max(3.0, 0.8 * state.v)
    target, _ = lane.centerline.point_at(my_s + look, extrapolate=True)
    err = wrap_angle(math.atan2(target[1] - state.y, target[0] - state.x) - state.psi)
    w_max = 0.25 * max(state.v, 0.1)
    yaw_rate = float(np.clip(1.5 * err, -w_max, w_max))
    return step_vehicle(state, VehicleInput(accel, yaw_rate), dt)


def step_sim(world: WorldState, ego_plan: JointPlan, dt: float, scenario: Scenario) -> WorldState:
    """Advance the world one step: the ego executes the plan's first input,
    agents follow their policies, and collisions are detected exactly."""
    u0 = ego_plan.ego_inputs[0]
    ego_next = step_vehicle(world.ego, VehicleInput(float(u0[0]), float(u0[1])), dt)

    agents_next: dict[str, VehicleState | PedestrianState] = {}
    t_next = world.t + dt
    for agent in scenario.agents:
        state = world.agents[agent.agent_id]
        if agent.policy.kind is PolicyKind.REPLAY:
            agents_next[agent.agent_id] = _replay_state(agent.policy.trajectory, t_next, state)
        elif agent.policy.kind is PolicyKind.CONSTANT_VELOCITY:
            if isinstance(state, VehicleState):
                agents_next[agent.agent_id] = step_vehicle(state, VehicleInput(0.0, 0.0), dt)
            else:
                agents_next[agent.agent_id] = step_pedestrian(state, PedestrianInput(0.0, 0.0), dt)
        else:
            agents_next[agent.agent_id] = _reactive_step(
                agent, state, world, scenario, scenario.ego_footprint, dt
            )

    collisions = []
    ego_fp = _footprint_at_state(scenario.ego_footprint, ego_next)
    for agent in scenario.agents:
        fp = _footprint_at_state(agent.footprint, agents_next[agent.agent_id])
        if footprints_overlap(ego_fp, fp):
            collisions.append(agent.agent_id)

    return WorldState(
        step=world.step + 1, t=t_next, ego=ego_next, agents=agents_next,
        collisions=collisions,
    )


# --- logging -----------------------------------------------------------------

def _state_list(state) -> list[float]:
    return [float(v) for v in state.as_array()]


@dataclass
class SimLog:
    header: dict
    records: list[dict]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"header": self.header}, sort_keys=True)]
        for rec in self.records:
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "SimLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])["header"]
        records = [json.loads(ln) for ln in lines[1:]]
        return cls(header=header, records=records)


def run_closed_loop(
    scenario: Scenario, config: PlannerConfig, collect_timings: bool = True
) -> tuple[SimLog, list[dict]]:
    """Receding-horizon loop: replan every planner step, execute the first
    input, advance agents, stop at the duration or on an ego collision.

    Returns the log (timing-free, byte-reproducible) and a separate list of
    per-cycle timing records.
    """
    from .scenarios import scenario_to_json  # local import to avoid a cycle

    if scenario.sim_dt <= 0:
        raise ValueError("sim_dt must be positive")
    graph = scenario.lane_graph
    n_steps = int(round(scenario.duration / scenario.sim_dt))
    substeps = max(1, int(round(config.dt / scenario.sim_dt)))

    world = WorldState(
        step=0, t=0.0, ego=scenario.ego_state,
        agents={a.agent_id: a.state for a in scenario.agents},
    )
    history: dict[str, list] = {a.agent_id: [a.state] for a in scenario.agents}

    route = plan_route(graph, world.ego)
    reference = build_reference(
        route, graph, world.ego, scenario.v_des,
        horizon_steps=config.horizon_steps, dt=config.dt,
    )
    header = {
        "scenario": scenario_to_json(scenario),
        "mode": config.mode,
        "seed": config.seed,
        "planner_dt": config.dt,
        "route": [list(map(float, p)) for p in reference.centerline.xy],
        "v_des": scenario.v_des,
    }

    records: list[dict] = []
    timings: list[dict] = []
    current_plan: JointPlan | None = None
    diag: PlanDiagnostics | None = None
    warm_cache: dict = {}

    for k in range(n_steps):
        if k % substeps == 0:
            try:
                route = plan_route(graph, world.ego)
                reference = build_reference(
                    route, graph, world.ego, scenario.v_des,
                    horizon_steps=config.horizon_steps, dt=config.dt,
                )
            except NoRouteFoundError:
                pass  # keep the previous reference
            scene = _scene_from_world(world, scenario, history, graph)
            current_plan, diag = plan(scene, reference, graph, config, warm_cache=warm_cache)
            if collect_timings:
                timings.append({"step": k, **{k2: float(v) for k2, v in diag.timings.items()}})

        rec = {
            "step": world.step,
            "t": round(world.t, 9),
            "ego": _state_list(world.ego),
            "agents": {a.agent_id: _state_list(world.agents[a.agent_id]) for a in scenario.agents},
            "collisions": list(world.collisions),
            "plan": current_plan.to_record(),
            "n_candidates": diag.n_candidates,
            "fallback": diag.fallback,
            "candidate_modes": [
                None if p.mode_vector is None else list(p.mode_vector.modes)
                for p in diag.candidate_plans
            ],
            "candidate_preserved": [p.preserved_mode for p in diag.candidate_plans],
        }
        records.append(rec)

        world = step_sim(world, current_plan, scenario.sim_dt, scenario)
        for agent in scenario.agents:
            history[agent.agent_id].append(world.agents[agent.agent_id])
            if len(history[agent.agent_id]) > 12:
                history[agent.agent_id].pop(0)
        if world.collisions:
            records.append(
                {
                    "step": world.step,
                    "t": round(world.t, 9),
                    "ego": _state_list(world.ego),
                    "agents": {
                        a.agent_id: _state_list(world.agents[a.agent_id]) for a in scenario.agents
                    },
                    "collisions": list(world.collisions),
                    "plan": current_plan.to_record(),
                    "n_candidates": diag.n_candidates,
                    "fallback": diag.fallback,
                    "candidate_modes": rec["candidate_modes"],
                    "candidate_preserved": rec["candidate_preserved"],
                    "terminal": True,
                }
            )
            break

    return SimLog(header=header, records=records), timings


def _scene_from_world(
    world: WorldState, scenario: Scenario, history: dict[str, list], graph: LaneGraph
) -> SceneSnapshot:
    agents = []
    for a in scenario.agents:
        states = history[a.agent_id]
        xy = np.array([[s.x, s.y] for s in states])
        if len(xy) < 2:
            back = xy[0] - _velocity_of(states[0]) * scenario.sim_dt
            xy = np.vstack([back, xy])
        hist = DiscreteTrajectory.from_xy(xy, dt=scenario.sim_dt, agent_id=a.agent_id)
        agents.append(
            Agent(
                agent_id=a.agent_id, kind=a.kind, state=world.agents[a.agent_id],
                footprint=a.footprint, history=hist,
            )
        )
    return SceneSnapshot(
        ego_state=world.ego, ego_footprint=scenario.ego_footprint,
        agents=tuple(agents), lanes=graph, timestamp=world.t,
    )


def _velocity_of(state) -> np.ndarray:
    if isinstance(state, VehicleState):
        return state.v * np.array([math.cos(state.psi), math.sin(state.psi)])
    return np.array([state.vx, state.vy])


# --- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    drivable_area_compliance: float
    progress: float
    no_at_fault_collision: float

    @property
    def final_score(self) -> float:
        return (self.drivable_area_compliance + self.progress + self.no_at_fault_collision) / 3.0

    def to_dict(self) -> dict:
        return {
            "drivable_area_compliance": self.drivable_area_compliance,
            "progress": self.progress,
            "no_at_fault_collision": self.no_at_fault_collision,
            "final_score": self.final_score,
        }


DRIVABLE_TOLERANCE = 0.3


def _point_in_drivable(graph: LaneGraph, p: np.ndarray, tol: float) -> bool:
    for lane_id in sorted(graph.lanes):
        lane = graph.lanes[lane_id]
        lat_l = project_to_polyline(p, lane.left_boundary).signed_lateral
        lat_r = project_to_polyline(p, lane.right_boundary).signed_lateral
        if lat_l <= tol and lat_r >= -tol:
            proj = project_to_polyline(p, lane.centerline)
            if -1.0 <= proj.arclength <= lane.centerline.total_length + 1.0:
                return True
    return False


def _is_lane_keeping(graph: LaneGraph, traj_xy: list[np.ndarray]) -> bool:
    """An agent is lane-keeping if its lateral offset to its nearest centerline
    stayed roughly constant over the recent past."""
    if len(traj_xy) < 2:
        return True
    hit = graph.nearest_lane(traj_xy[-1])
    if hit is None:
        return False
    lane = graph.lanes[hit[0]]
    lat_now = hit[1].signed_lateral
    lat_then = project_to_polyline(traj_xy[0], lane.centerline).signed_lateral
    return abs(lat_now - lat_then) < 0.3


def _ego_at_fault(log: "SimLog", idx: int, agent_id: str, graph: LaneGraph) -> bool:
    rec = log.records[idx]
    ego = rec["ego"]
    speed = ego[2]
    if speed < 0.2:
        return False
    scenario = log.header["scenario"]
    meta = next(a for a in scenario["agents"] if a["id"] == agent_id)
    ax, ay = rec["agents"][agent_id][0], rec["agents"][agent_id][1]
    ex, ey, psi = ego[0], ego[1], ego[3]
    rel = np.array([ax - ex, ay - ey])
    dx = math.cos(psi) * rel[0] + math.sin(psi) * rel[1]
    hl = scenario["ego"]["footprint"]["half_length"]
    if dx >= 0.2 * hl:
        return True  # front face involved while moving
    closing = speed * float(
        np.array([math.cos(psi), math.sin(psi)]) @ rel / max(np.linalg.norm(rel), 1e-9)
    )
    past = [
        np.array([r["agents"][agent_id][0], r["agents"][agent_id][1]])
        for r in log.records[max(0, idx - 7) : idx + 1]
    ]
    if closing > 0.3 and meta["kind"] != "pedestrian" and _is_lane_keeping(graph, past):
        return True  # ego moved laterally into a lane-keeping agent
    return False


def compute_metrics(log: SimLog) -> Metrics:
    """Aggregate scores recomputed purely from the log."""
    from .scenarios import scenario_from_json

    if not log.records:
        raise ValueError("log is empty")
    scenario = scenario_from_json(log.header["scenario"])
    graph = scenario.lane_graph
    route = Polyline.from_points(np.array(log.header["route"]))

    hl = scenario.ego_footprint.half_length
    hw = scenario.ego_footprint.half_width
    compliant = 0
    for rec in log.records:
        ego = rec["ego"]
        corners = _box_corners(ego[0], ego[1], ego[3], hl, hw)
        if all(_point_in_drivable(graph, c, DRIVABLE_TOLERANCE) for c in corners):
            compliant += 1
    drivable = compliant / len(log.records)

    start = np.array(log.records[0]["ego"][0:2])
    end = np.array(log.records[-1]["ego"][0:2])
    s0 = project_to_polyline(start, route).arclength
    s1 = project_to_polyline(end, route).arclength
    denom = max(scenario.v_des * scenario.duration, 1e-9)
    progress = min(max((s1 - s0) / denom, 0.0), 1.0)

    at_fault = False
    seen = set()
    for idx, rec in enumerate(log.records):
        for agent_id in rec.get("collisions", []):
            if agent_id in seen:
                continue
            seen.add(agent_id)
            if _ego_at_fault(log, idx, agent_id, graph):
                at_fault = True
    no_fault = 0.0 if at_fault else 1.0

    return Metrics(
        drivable_area_compliance=drivable, progress=progress, no_at_fault_collision=no_fault
    )
