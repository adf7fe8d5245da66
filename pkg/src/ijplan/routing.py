"""Lane-graph route planning (bounded depth-first search over on-route lanes)
and reference-trajectory generation at the planner's time step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Polyline, project_to_polyline, unit, wrap_angle
from .dynamics import VehicleState
from .homotopy import DiscreteTrajectory


class NoRouteFoundError(RuntimeError):
    pass


ROUTE_SEARCH_RADIUS = 50.0
COST_W_DISTANCE = 1.0
COST_W_LENGTH = 0.1
COST_W_CURVATURE = 5.0


@dataclass(frozen=True)
class Lane:
    lane_id: str
    centerline: Polyline
    left_boundary: Polyline
    right_boundary: Polyline
    successors: tuple[str, ...] = ()
    on_route: bool = True
    speed_limit: float = 15.0
    left_neighbor: str | None = None
    right_neighbor: str | None = None

    @property
    def length(self) -> float:
        return self.centerline.total_length

    @property
    def curvature_total(self) -> float:
        """Integrated absolute heading change along the centerline."""
        seg = np.diff(self.centerline.xy, axis=0)
        hd = np.arctan2(seg[:, 1], seg[:, 0])
        d = np.diff(hd)
        d = (d + math.pi) % (2.0 * math.pi) - math.pi
        return float(np.abs(d).sum())


@dataclass(frozen=True)
class LaneGraph:
    lanes: dict[str, Lane]

    def __post_init__(self):
        for lane in self.lanes.values():
            # boundaries must sit on opposite sides of the centerline
            mid, _ = lane.centerline.point_at(lane.centerline.total_length / 2.0)
            lat_l = project_to_polyline(mid, lane.left_boundary).signed_lateral
            lat_r = project_to_polyline(mid, lane.right_boundary).signed_lateral
            if not (lat_l < 0.0 < lat_r):
                raise ValueError(
                    f"lane {lane.lane_id}: boundaries must flank the centerline"
                )
            for succ in lane.successors:
                if succ not in self.lanes:
                    continue
                gap = np.linalg.norm(
                    self.lanes[succ].centerline.xy[0] - lane.centerline.xy[-1]
                )
                if gap > 0.5:
                    raise ValueError(
                        f"lane {lane.lane_id}->{succ}: endpoints {gap:.2f} m apart"
                    )

    def nearest_lane(self, point, on_route_only: bool = False):
        """(lane_id, projection) minimizing distance to the centerline."""
        best = None
        for lane_id in sorted(self.lanes):
            lane = self.lanes[lane_id]
            if on_route_only and not lane.on_route:
                continue
            proj = project_to_polyline(point, lane.centerline)
            p, _ = lane.centerline.point_at(proj.arclength)
            d = float(np.linalg.norm(np.asarray(point, dtype=float) - p))
            if best is None or d < best[0]:
                best = (d, lane_id, proj)
        if best is None:
            return None
        return best[1], best[2]


def _enumerate_sequences(graph: LaneGraph, first: str, depth: int):
    """All on-route successor sequences from ``first`` up to ``depth`` lanes."""
    results = []

    def walk(path):
        lane = graph.lanes[path[-1]]
        succ = [
            s
            for s in lane.successors
            if s in graph.lanes and graph.lanes[s].on_route and s not in path
        ]
        if len(path) == depth or not succ:
            results.append(tuple(path))
            return
        for s in sorted(succ):
            walk(path + [s])

    walk([first])
    return results


def plan_route(graph: LaneGraph, ego: VehicleState, depth: int = 4) -> tuple[str, ...]:
    """Depth-first search over on-route lanes balancing entry distance, plan
    length and accumulated curvature; deterministic lexicographic tie-break."""
    ego_xy = np.array([ego.x, ego.y])
    entries = []
    for lane_id in sorted(graph.lanes):
        lane = graph.lanes[lane_id]
        if not lane.on_route:
            continue
        proj = project_to_polyline(ego_xy, lane.centerline)
        p, _ = lane.centerline.point_at(proj.arclength)
        d = float(np.linalg.norm(ego_xy - p))
        if d <= ROUTE_SEARCH_RADIUS:
            entries.append((lane_id, d))
    if not entries:
        raise NoRouteFoundError("no on-route lane within search radius")

    best = None
    for lane_id, entry_dist in entries:
        for seq in _enumerate_sequences(graph, lane_id, depth):
            length = sum(graph.lanes[i].length for i in seq)
            curvature = sum(graph.lanes[i].curvature_total for i in seq)
            cost = (
                COST_W_DISTANCE * entry_dist
                - COST_W_LENGTH * length
                + COST_W_CURVATURE * curvature
            )
            key = (cost, seq)
            if best is None or key < best:
                best = key
    return best[1]


@dataclass(frozen=True)
class Reference:
    """Time-parametrized reference for the planner plus per-step active
    boundaries and the concatenated route centerline."""

    trajectory: DiscreteTrajectory
    lane_sequence: tuple[str, ...]
    boundaries: tuple[tuple[Polyline, Polyline], ...]  # (left, right) per step
    centerline: Polyline
    speeds: np.ndarray


def _corridor_boundaries(graph: LaneGraph, lane: Lane) -> tuple[Polyline, Polyline]:
    """Outermost drivable boundaries: walk the adjacency chain so multi-lane
    roads constrain the planner at the road edge, not the lane edge."""
    left = lane
    seen = {lane.lane_id}
    while left.left_neighbor and left.left_neighbor in graph.lanes:
        if left.left_neighbor in seen:
            break
        seen.add(left.left_neighbor)
        left = graph.lanes[left.left_neighbor]
    right = lane
    seen = {lane.lane_id}
    while right.right_neighbor and right.right_neighbor in graph.lanes:
        if right.right_neighbor in seen:
            break
        seen.add(right.right_neighbor)
        right = graph.lanes[right.right_neighbor]
    return left.left_boundary, right.right_boundary


def _concatenate_centerlines(graph: LaneGraph, sequence) -> tuple[Polyline, np.ndarray]:
    """Route centerline and, per waypoint, the owning lane index."""
    pts = []
    owners = []
    for k, lane_id in enumerate(sequence):
        xy = graph.lanes[lane_id].centerline.xy
        if pts and np.linalg.norm(pts[-1] - xy[0]) < 1e-9:
            xy = xy[1:]
        for p in xy:
            pts.append(p)
            owners.append(k)
    return Polyline.from_points(np.array(pts)), np.array(owners)


def build_reference(
    sequence,
    graph: LaneGraph,
    ego: VehicleState,
    v_des: float,
    horizon_steps: int = 20,
    dt: float = 0.15,
) -> Reference:
    """Project the ego onto the route and interpolate waypoints at arclength
    increments of the desired (speed-limit-capped) velocity."""
    if not sequence:
        raise ValueError("lane sequence must be nonempty")
    center, owners = _concatenate_centerlines(graph, sequence)
    proj = project_to_polyline(np.array([ego.x, ego.y]), center)

    n_points = horizon_steps + 1
    xy = np.empty((n_points, 2))
    headings = np.empty(n_points)
    speeds = np.empty(n_points)
    boundaries = []
    s = proj.arclength
    for k in range(n_points):
        p, hd = center.point_at(s, extrapolate=True)
        xy[k] = p
        headings[k] = hd
        idx = int(
            np.searchsorted(
                center.cumulative_arclength, min(s, center.total_length), side="right"
            )
            - 1
        )
        idx = min(max(idx, 0), len(owners) - 2)
        lane = graph.lanes[sequence[owners[idx]]]
        speeds[k] = min(v_des, lane.speed_limit)
        boundaries.append(_corridor_boundaries(graph, lane))
        s += speeds[k] * dt

    traj = DiscreteTrajectory(
        xy=xy, headings=headings, dt=dt, agent_id="reference", speeds=speeds
    )
    return Reference(
        trajectory=traj,
        lane_sequence=tuple(sequence),
        boundaries=tuple(boundaries),
        centerline=center,
        speeds=speeds,
    )
