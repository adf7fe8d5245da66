"""Scripted scenario suite (6 templates x 2 traffic densities) and the JSON
scenario-file schema used by the simulator and CLI.
"""
from __future__ import annotations

import json
import math

import numpy as np

from .dynamics import PedestrianState, VehicleState
from .geometry import Disc, OrientedBox, Polyline, Pose2
from .homotopy import DiscreteTrajectory
from .predictor import AgentKind
from .routing import Lane, LaneGraph
from .sim import AgentPolicy, IdmParams, PolicyKind, Scenario, ScenarioAgent

LANE_WIDTH = 3.5
CAR = dict(half_length=2.25, half_width=0.95)


def _offset_polyline(xy: np.ndarray, lateral: float) -> Polyline:
    seg = np.diff(xy, axis=0)
    hd = np.arctan2(seg[:, 1], seg[:, 0])
    hd = np.concatenate([hd, hd[-1:]])
    normals = np.column_stack([-np.sin(hd), np.cos(hd)])
    return Polyline.from_points(xy + lateral * normals)


def lane_from_centerline(
    lane_id: str,
    xy: np.ndarray,
    width: float = LANE_WIDTH,
    successors=(),
    on_route: bool = True,
    speed_limit: float = 15.0,
    left_neighbor: str | None = None,
    right_neighbor: str | None = None,
) -> Lane:
    return Lane(
        lane_id=lane_id,
        centerline=Polyline.from_points(xy),
        left_boundary=_offset_polyline(xy, width / 2.0),
        right_boundary=_offset_polyline(xy, -width / 2.0),
        successors=tuple(successors),
        on_route=on_route,
        speed_limit=speed_limit,
        left_neighbor=left_neighbor,
        right_neighbor=right_neighbor,
    )


def straight_lane(lane_id, y, x0, x1, spacing=10.0, **kwargs) -> Lane:
    n = max(2, int(math.ceil((x1 - x0) / spacing)) + 1)
    xs = np.linspace(x0, x1, n)
    xy = np.column_stack([xs, np.full(n, float(y))])
    return lane_from_centerline(lane_id, xy, **kwargs)


def _s_curve(x0, y0, x1, y1, spacing=2.0) -> np.ndarray:
    """Cubic lateral blend with zero end slopes."""
    n = max(4, int(math.ceil((x1 - x0) / spacing)) + 1)
    xs = np.linspace(x0, x1, n)
    u = (xs - x0) / (x1 - x0)
    ys = y0 + (y1 - y0) * (3.0 * u**2 - 2.0 * u**3)
    return np.column_stack([xs, ys])


def _car_box(x, y, heading=0.0) -> OrientedBox:
    return OrientedBox(Pose2(x, y, heading), CAR["half_length"], CAR["half_width"])


def _vehicle(agent_id, x, y, v, psi=0.0, policy=None) -> ScenarioAgent:
    return ScenarioAgent(
        agent_id=agent_id,
        kind=AgentKind.VEHICLE,
        state=VehicleState(x=x, y=y, v=v, psi=psi),
        footprint=OrientedBox(Pose2(0.0, 0.0, 0.0), CAR["half_length"], CAR["half_width"]),
        policy=policy or AgentPolicy(kind=PolicyKind.CONSTANT_VELOCITY),
    )


def _pedestrian(agent_id, x, y, vx, vy, radius=0.35) -> ScenarioAgent:
    return ScenarioAgent(
        agent_id=agent_id,
        kind=AgentKind.PEDESTRIAN,
        state=PedestrianState(x=x, y=y, vx=vx, vy=vy),
        footprint=Disc(center=(0.0, 0.0), radius=radius),
        policy=AgentPolicy(kind=PolicyKind.CONSTANT_VELOCITY),
    )


def _braking_replay(x0, y, v0, decel, duration, dt=0.15) -> DiscreteTrajectory:
    n = int(round(duration / dt)) + 1
    xs = np.empty(n)
    speeds = np.empty(n)
    x, v = x0, v0
    for i in range(n):
        xs[i] = x
        speeds[i] = v
        x += v * dt
        v = max(v + decel * dt, 0.0)
    xy = np.column_stack([xs, np.full(n, float(y))])
    return DiscreteTrajectory(
        xy=xy, headings=np.zeros(n), dt=dt, agent_id="replay", speeds=speeds
    )


def _two_lane_road(length=300.0) -> LaneGraph:
    lane0 = straight_lane(
        "lane0", 0.0, 0.0, length, left_neighbor="lane1"
    )
    lane1 = straight_lane(
        "lane1", LANE_WIDTH, 0.0, length, right_neighbor="lane0"
    )
    return LaneGraph(lanes={"lane0": lane0, "lane1": lane1})


def trailing_lane_change(dense: bool = False, duration: float = 10.0) -> Scenario:
    """A slowing lead blocks the ego's lane while a faster vehicle trails in
    the adjacent lane; merging interacts with the trailing vehicle."""
    graph = _two_lane_road()
    agents = [
        _vehicle(
            "lead", 48.0, 0.0, 2.0,
            policy=AgentPolicy(
                kind=PolicyKind.REPLAY,
                trajectory=_braking_replay(48.0, 0.0, 2.0, -2.0, duration + 4.0),
            ),
        ),
        _vehicle(
            "trail", 15.0, LANE_WIDTH, 13.0,
            policy=AgentPolicy(
                kind=PolicyKind.LANE_FOLLOW_REACTIVE, idm=IdmParams(desired_speed=13.0)
            ),
        ),
    ]
    if dense:
        agents.append(
            _vehicle(
                "ahead", 95.0, LANE_WIDTH, 9.0,
                policy=AgentPolicy(
                    kind=PolicyKind.LANE_FOLLOW_REACTIVE, idm=IdmParams(desired_speed=9.0)
                ),
            )
        )
    return Scenario(
        name="trailing_lane_change" + ("_dense" if dense else ""),
        lane_graph=graph,
        ego_state=VehicleState(x=30.0, y=0.0, v=9.0, psi=0.0),
        ego_footprint=_car_box(30.0, 0.0),
        v_des=10.0,
        agents=tuple(agents),
        duration=duration,
    )


def slow_lead(dense: bool = False, duration: float = 10.0) -> Scenario:
    graph = LaneGraph(lanes={"lane0": straight_lane("lane0", 0.0, 0.0, 300.0)})
    gap = 14.0 if dense else 22.0
    lead_v = 3.0 if dense else 4.5
    agents = [_vehicle("lead", 30.0 + gap, 0.0, lead_v)]
    if dense:
        agents.append(_vehicle("lead2", 30.0 + gap + 14.0, 0.0, lead_v))
    return Scenario(
        name="slow_lead" + ("_dense" if dense else ""),
        lane_graph=graph,
        ego_state=VehicleState(x=30.0, y=0.0, v=9.0, psi=0.0),
        ego_footprint=_car_box(30.0, 0.0),
        v_des=11.0,
        agents=tuple(agents),
        duration=duration,
    )


def merge(dense: bool = False, duration: float = 12.0) -> Scenario:
    """The ego's lane ends and folds into the main lane carrying traffic."""
    ego_a = straight_lane("ego_a", 0.0, 0.0, 60.0, successors=("ego_merge",))
    ego_merge = lane_from_centerline(
        "ego_merge", _s_curve(60.0, 0.0, 110.0, LANE_WIDTH), successors=("main_b",)
    )
    main_a = straight_lane(
        "main_a", LANE_WIDTH, 0.0, 110.0, successors=("main_b",), on_route=False
    )
    main_b = straight_lane("main_b", LANE_WIDTH, 110.0, 320.0)
    graph = LaneGraph(
        lanes={l.lane_id: l for l in (ego_a, ego_merge, main_a, main_b)}
    )
    traffic = [(35.0, 8.0)] if not dense else [(42.0, 8.0), (12.0, 8.5)]
    agents = [
        _vehicle(
            f"main{i}", x, LANE_WIDTH, v,
            policy=AgentPolicy(
                kind=PolicyKind.LANE_FOLLOW_REACTIVE, idm=IdmParams(desired_speed=v)
            ),
        )
        for i, (x, v) in enumerate(traffic)
    ]
    return Scenario(
        name="merge" + ("_dense" if dense else ""),
        lane_graph=graph,
        ego_state=VehicleState(x=20.0, y=0.0, v=8.0, psi=0.0),
        ego_footprint=_car_box(20.0, 0.0),
        v_des=9.0,
        agents=tuple(agents),
        duration=duration,
    )


def pedestrian_crossing(dense: bool = False, duration: float = 10.0) -> Scenario:
    graph = LaneGraph(lanes={"lane0": straight_lane("lane0", 0.0, 0.0, 250.0)})
    agents = [_pedestrian("ped0", 48.0, 5.0, 0.0, -1.2)]
    if dense:
        agents.append(_pedestrian("ped1", 56.0, -4.5, 0.0, 1.0))
    return Scenario(
        name="pedestrian_crossing" + ("_dense" if dense else ""),
        lane_graph=graph,
        ego_state=VehicleState(x=25.0, y=0.0, v=8.0, psi=0.0),
        ego_footprint=_car_box(25.0, 0.0),
        v_des=10.0,
        agents=tuple(agents),
        duration=duration,
    )


def intersection(dense: bool = False, duration: float = 12.0) -> Scenario:
    graph = LaneGraph(lanes={"lane0": straight_lane("lane0", 0.0, 0.0, 280.0)})
    agents = [
        _vehicle("cross0", 100.0, 34.0, 8.5, psi=-math.pi / 2.0),
    ]
    if dense:
        agents.append(_vehicle("cross1", 103.5, -42.0, 8.5, psi=math.pi / 2.0))
    return Scenario(
        name="intersection" + ("_dense" if dense else ""),
        lane_graph=graph,
        ego_state=VehicleState(x=60.0, y=0.0, v=10.0, psi=0.0),
        ego_footprint=_car_box(60.0, 0.0),
        v_des=10.0,
        agents=tuple(agents),
        duration=duration,
    )


def narrow_passage(dense: bool = False, duration: float = 10.0) -> Scenario:
    graph = LaneGraph(lanes={"lane0": straight_lane("lane0", 0.0, 0.0, 250.0)})
    intrusion = 1.3 if dense else 1.6
    agents = [
        _vehicle("parked_l", 55.0, intrusion, 0.0),
        _vehicle("parked_r", 70.0, -intrusion, 0.0),
    ]
    if dense:
        agents += [
            _vehicle("parked_l2", 85.0, intrusion, 0.0),
            _vehicle("parked_r2", 100.0, -intrusion, 0.0),
        ]
    return Scenario(
        name="narrow_passage" + ("_dense" if dense else ""),
        lane_graph=graph,
        ego_state=VehicleState(x=20.0, y=0.0, v=7.0, psi=0.0),
        ego_footprint=_car_box(20.0, 0.0),
        v_des=8.0,
        agents=tuple(agents),
        duration=duration,
    )


SCENARIO_BUILDERS = {
    "trailing_lane_change": trailing_lane_change,
    "slow_lead": slow_lead,
    "merge": merge,
    "pedestrian_crossing": pedestrian_crossing,
    "intersection": intersection,
    "narrow_passage": narrow_passage,
}


def build_suite() -> list[Scenario]:
    """The 12-scenario evaluation suite: each template at 2 densities."""
    out = []
    for name in SCENARIO_BUILDERS:
        out.append(SCENARIO_BUILDERS[name](dense=False))
        out.append(SCENARIO_BUILDERS[name](dense=True))
    return out


# --- JSON schema --------------------------------------------------------------

def _poly_to_json(p: Polyline) -> dict:
    return {
        "xy": [[float(a), float(b)] for a, b in p.xy],
        "headings": [float(h) for h in p.headings],
    }


def _poly_from_json(d: dict) -> Polyline:
    return Polyline(xy=np.array(d["xy"]), headings=np.array(d["headings"]))


def _footprint_to_json(fp) -> dict:
    if isinstance(fp, OrientedBox):
        return {
            "type": "box",
            "half_length": float(fp.half_length),
            "half_width": float(fp.half_width),
        }
    return {"type": "disc", "radius": float(fp.radius)}


def _footprint_from_json(d: dict):
    if d["type"] == "box":
        return OrientedBox(Pose2(0.0, 0.0, 0.0), d["half_length"], d["half_width"])
    return Disc(center=(0.0, 0.0), radius=d["radius"])


def _state_to_json(state) -> dict:
    if isinstance(state, VehicleState):
        return {"type": "vehicle", "x": state.x, "y": state.y, "v": state.v, "psi": state.psi}
    return {"type": "pedestrian", "x": state.x, "y": state.y, "vx": state.vx, "vy": state.vy}


def _state_from_json(d: dict):
    if d["type"] == "vehicle":
        return VehicleState(x=d["x"], y=d["y"], v=d["v"], psi=d["psi"])
    return PedestrianState(x=d["x"], y=d["y"], vx=d["vx"], vy=d["vy"])


def _traj_to_json(t: DiscreteTrajectory | None) -> dict | None:
    if t is None:
        return None
    return {
        "xy": [[float(a), float(b)] for a, b in t.xy],
        "headings": [float(h) for h in t.headings],
        "speeds": None if t.speeds is None else [float(v) for v in t.speeds],
        "dt": float(t.dt),
        "agent_id": t.agent_id,
    }


def _traj_from_json(d: dict | None) -> DiscreteTrajectory | None:
    if d is None:
        return None
    return DiscreteTrajectory(
        xy=np.array(d["xy"]),
        headings=np.array(d["headings"]),
        dt=d["dt"],
        agent_id=d.get("agent_id", ""),
        speeds=None if d.get("speeds") is None else np.array(d["speeds"]),
    )


def scenario_to_json(s: Scenario) -> dict:
    return {
        "name": s.name,
        "duration": float(s.duration),
        "sim_dt": float(s.sim_dt),
        "seed": int(s.seed),
        "lanes": [
            {
                "id": lane.lane_id,
                "centerline": _poly_to_json(lane.centerline),
                "left_boundary": _poly_to_json(lane.left_boundary),
                "right_boundary": _poly_to_json(lane.right_boundary),
                "successors": list(lane.successors),
                "on_route": lane.on_route,
                "speed_limit": float(lane.speed_limit),
                "left_neighbor": lane.left_neighbor,
                "right_neighbor": lane.right_neighbor,
            }
            for lane in (s.lane_graph.lanes[i] for i in sorted(s.lane_graph.lanes))
        ],
        "ego": {
            "state": _state_to_json(s.ego_state),
            "footprint": _footprint_to_json(s.ego_footprint),
            "v_des": float(s.v_des),
        },
        "agents": [
            {
                "id": a.agent_id,
                "kind": a.kind.value,
                "state": _state_to_json(a.state),
                "footprint": _footprint_to_json(a.footprint),
                "policy": {
                    "kind": a.policy.kind.value,
                    "trajectory": _traj_to_json(a.policy.trajectory),
                    "idm": None
                    if a.policy.idm is None
                    else {
                        "desired_speed": a.policy.idm.desired_speed,
                        "time_headway": a.policy.idm.time_headway,
                        "min_gap": a.policy.idm.min_gap,
                        "accel_max": a.policy.idm.accel_max,
                        "decel_comfort": a.policy.idm.decel_comfort,
                        "exponent": a.policy.idm.exponent,
                    },
                },
            }
            for a in s.agents
        ],
    }


def scenario_from_json(d: dict) -> Scenario:
    lanes = {}
    for ld in d["lanes"]:
        lanes[ld["id"]] = Lane(
            lane_id=ld["id"],
            centerline=_poly_from_json(ld["centerline"]),
            left_boundary=_poly_from_json(ld["left_boundary"]),
            right_boundary=_poly_from_json(ld["right_boundary"]),
            successors=tuple(ld.get("successors", ())),
            on_route=ld.get("on_route", True),
            speed_limit=ld.get("speed_limit", 15.0),
            left_neighbor=ld.get("left_neighbor"),
            right_neighbor=ld.get("right_neighbor"),
        )
    agents = []
    for ad in d["agents"]:
        pd = ad["policy"]
        policy = AgentPolicy(
            kind=PolicyKind(pd["kind"]),
            trajectory=_traj_from_json(pd.get("trajectory")),
            idm=None if pd.get("idm") is None else IdmParams(**pd["idm"]),
        )
        agents.append(
            ScenarioAgent(
                agent_id=ad["id"],
                kind=AgentKind(ad["kind"]),
                state=_state_from_json(ad["state"]),
                footprint=_footprint_from_json(ad["footprint"]),
                policy=policy,
            )
        )
    return Scenario(
        name=d["name"],
        lane_graph=LaneGraph(lanes=lanes),
        ego_state=_state_from_json(d["ego"]["state"]),
        ego_footprint=_footprint_from_json(d["ego"]["footprint"]),
        v_des=d["ego"]["v_des"],
        agents=tuple(agents),
        duration=d.get("duration", 10.0),
        sim_dt=d.get("sim_dt", 0.15),
        seed=d.get("seed", 0),
    )


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_json(s), fh, indent=1, sort_keys=True)


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_json(json.load(fh))
