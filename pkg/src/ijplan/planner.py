"""Joint ego+agent MPC: per homotopy candidate, assemble the linearized QP
(tracking / deviation / effort costs, dynamics, bounds, collision and lane
rows with slack), run several SQP rounds with a proximal term, and pick the
best candidate by nonlinear cost with a slack feasibility guard.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import qp as qpmod
from .dynamics import (
    DynamicLimits,
    PedestrianState,
    VehicleState,
    linearize_pedestrian,
    linearize_vehicle,
    pedestrian_limit_rows,
    rollout_pedestrian,
    rollout_vehicle,
    vehicle_limit_rows,
    VehicleInput,
)
from .geometry import (
    Disc,
    OrientedBox,
    Pose2,
    box_box_constraints,
    box_disc_margin,
    perp,
    project_to_polyline,
    wrap_angle,
)
from .homotopy import (
    DiscreteTrajectory,
    HomotopyConfig,
    ModeVector,
    angular_distance,
    mode_interval,
    mode_of,
)
from .predictor import (
    Agent,
    AgentKind,
    JointPrediction,
    PredictorKind,
    SceneSnapshot,
    align_prediction,
    classify_agents,
    make_dummy,
    predict,
)
from .routing import Reference
from .sampler import (
    HomotopyCandidate,
    NoValidCandidateError,
    SampleLattice,
    default_lattice,
    sample_ego,
    select_candidates,
)

REF_HEADING_WEIGHT = 0.5
REF_SPEED_WEIGHT = 0.2
AGENT_LANE_SLACK_FACTOR = 0.2  # agents may legitimately leave lanes; the ego may not


@dataclass(frozen=True)
class PlannerConfig:
    horizon_steps: int = 20
    dt: float = 0.15
    k_max: int = 6
    n_ec: int = 6
    n_nonec: int = 10
    sqp_rounds: int = 3
    eta_e: float = 1.0
    eta_o: float = 20.0
    w_ref: float = 1.0
    w_u_accel: float = 0.2
    w_u_jerk: float = 0.05
    w_dev: float = 1.0
    w_slack_collision: float = 400.0
    w_slack_lane: float = 60.0
    proximal_weight: float = 0.05
    theta_hat: float = math.pi / 3.0
    enforce_homotopy_constraint: bool = False
    limits: DynamicLimits = field(default_factory=DynamicLimits)
    predictor: PredictorKind = PredictorKind.LANE_FOLLOW
    n_prediction_samples: int = 4
    seed: int = 0
    mode: str = "ijp"  # "ijp" | "non_ec"
    lattice_offsets: tuple[float, ...] = (-3.5, -1.75, 0.0, 1.75, 3.5)
    slack_threshold_collision: float = 0.2
    slack_threshold_lane: float = 0.3
    qp_tol: float = 1e-5
    qp_max_iter: int = 400
    prune_margin: float = 12.0
    collision_buffer: float = 0.4  # slack-penalized proximity band around footprints
    constrain_all_prediction_samples: bool = False
    parallel: bool = False

    def __post_init__(self):
        if self.mode not in ("ijp", "non_ec"):
            raise ValueError("mode must be 'ijp' or 'non_ec'")
        if self.horizon_steps < 2 or self.dt <= 0.0:
            raise ValueError("invalid horizon")

    @property
    def horizon(self) -> float:
        return self.horizon_steps * self.dt

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PlannerConfig":
        kwargs = {}
        for key, value in mapping.items():
            if key == "limits":
                kwargs[key] = DynamicLimits(**value)
            elif key == "predictor":
                kwargs[key] = PredictorKind(value)
            elif key in ("lattice_offsets",):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


@dataclass
class JointPlan:
    """The selected (or candidate) joint solution, re-simulated through the
    nonlinear dynamics so initial states hold exactly."""

    ego: DiscreteTrajectory
    ego_inputs: np.ndarray
    agents: dict[str, DiscreteTrajectory]
    agent_inputs: dict[str, np.ndarray]
    cost_breakdown: dict[str, float]
    slack_usage: dict[str, float]
    mode_vector: ModeVector | None
    qp_status: str
    degraded: bool = False
    lin_gap: float = 0.0
    reward: float = 0.0
    prediction_index: int = 0
    preserved_mode: bool = True
    build_time: float = 0.0
    solve_time: float = 0.0

    @property
    def total_cost(self) -> float:
        return self.cost_breakdown.get("total", math.inf)

    def to_record(self) -> dict:
        return {
            "ego_xy": self.ego.xy.tolist(),
            "ego_speeds": None if self.ego.speeds is None else self.ego.speeds.tolist(),
            "agents_xy": {k: v.xy.tolist() for k, v in sorted(self.agents.items())},
            "cost_breakdown": {k: self.cost_breakdown[k] for k in sorted(self.cost_breakdown)},
            "slack_usage": {k: self.slack_usage[k] for k in sorted(self.slack_usage)},
            "mode_vector": None
            if self.mode_vector is None
            else {"modes": list(self.mode_vector.modes), "ids": list(self.mode_vector.obstacle_ids)},
            "qp_status": self.qp_status,
            "degraded": self.degraded,
            "lin_gap": self.lin_gap,
            "preserved_mode": self.preserved_mode,
        }


@dataclass
class PlanDiagnostics:
    timings: dict[str, float]
    candidate_plans: list[JointPlan]
    chosen_index: int
    n_samples: int
    n_candidates: int
    fallback: bool = False


class HorizonMismatchError(ValueError):
    pass


# one slot in the joint QP: ego or one EC agent (real or dummy)
@dataclass
class _Slot:
    name: str
    is_vehicle: bool  # unicycle states; pedestrians/dummies use double integrator
    states: np.ndarray  # (T+1, 4) linearization trajectory
    inputs: np.ndarray  # (T, 2)
    footprint: OrientedBox | Disc
    x0: np.ndarray
    is_dummy: bool = False
    pred_xy: np.ndarray | None = None  # (T, 2) frozen prediction, deviation target


NX, NU = 4, 2


def _slot_block(T: int) -> int:
    return (T + 1) * NX + T * NU


def _states_from_prediction(
    agent: Agent, traj: DiscreteTrajectory, dt: float
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Derive a dynamically consistent (states, inputs) linearization from a
    predicted position sequence, prepending the current state."""
    p0 = np.array([agent.state.x, agent.state.y])
    pos = np.vstack([p0, traj.xy])
    T = len(traj)
    vehicle = agent.kind in (AgentKind.VEHICLE, AgentKind.CYCLIST)
    states = np.zeros((T + 1, NX))
    states[:, 0:2] = pos
    inputs = np.zeros((T, NU))
    step = np.diff(pos, axis=0)
    if vehicle:
        speeds = np.linalg.norm(step, axis=1) / dt
        psi0 = agent.state.psi if isinstance(agent.state, VehicleState) else 0.0
        headings = np.empty(T + 1)
        headings[0] = psi0
        for t in range(T):
            if speeds[t] > 1e-6:
                raw = math.atan2(step[t][1], step[t][0])
                headings[t + 1] = headings[t] + wrap_angle(raw - headings[t])
            else:
                headings[t + 1] = headings[t]
        v = np.concatenate([speeds, speeds[-1:]])
        states[:, 2] = v
        states[:, 3] = headings
        inputs[:, 0] = np.diff(v) / dt
        inputs[:, 1] = np.diff(headings) / dt
        # positions implied by (v, psi) must match; recompute positions forward
        for t in range(T):
            states[t + 1, 0] = states[t, 0] + v[t] * math.cos(headings[t]) * dt
            states[t + 1, 1] = states[t, 1] + v[t] * math.sin(headings[t]) * dt
    else:
        vel = step / dt
        vel = np.vstack([vel, vel[-1:]])
        states[:, 2:4] = vel
        inputs[:, :] = np.diff(vel, axis=0) / dt
        for t in range(T):
            states[t + 1, 0:2] = states[t, 0:2] + vel[t] * dt
    return states, inputs, vehicle


def _ego_slot(candidate: HomotopyCandidate, scene: SceneSnapshot, T: int) -> _Slot:
    traj = candidate.ego_init
    if len(traj) != T + 1:
        raise HorizonMismatchError(
            f"candidate horizon {len(traj) - 1} != config horizon {T}"
        )
    states = np.column_stack(
        [traj.xy[:, 0], traj.xy[:, 1], traj.speeds, np.unwrap(traj.headings)]
    )
    return _Slot(
        name="ego",
        is_vehicle=True,
        states=states,
        inputs=candidate.ego_inputs.copy(),
        footprint=scene.ego_footprint,
        x0=states[0].copy(),
    )


def _build_slots(
    candidate: HomotopyCandidate,
    scene: SceneSnapshot,
    ec_ids: tuple[str, ...],
    config: PlannerConfig,
) -> list[_Slot]:
    T = config.horizon_steps
    slots = [_ego_slot(candidate, scene, T)]
    for agent_id in ec_ids:
        agent = scene.agent_by_id(agent_id)
        traj = candidate.agents_pred[agent_id]
        states, inputs, vehicle = _states_from_prediction(agent, traj, config.dt)
        slots.append(
            _Slot(
                name=agent_id,
                is_vehicle=vehicle,
                states=states,
                inputs=inputs,
                footprint=agent.footprint,
                x0=states[0].copy(),
                pred_xy=traj.xy.copy(),
            )
        )
    for k in range(config.n_ec - len(ec_ids)):
        slot_idx = len(ec_ids) + k
        state, footprint, traj = make_dummy(slot_idx, config.horizon, config.dt)
        states = np.zeros((T + 1, NX))
        states[:, 0] = state.x
        states[:, 1] = state.y
        slots.append(
            _Slot(
                name=f"dummy_{slot_idx}",
                is_vehicle=False,
                states=states,
                inputs=np.zeros((T, NU)),
                footprint=footprint,
                x0=states[0].copy(),
                is_dummy=True,
                pred_xy=traj.xy.copy(),
            )
        )
    return slots


class _Builder:
    """Triplet accumulator for the sparse QP blocks; core-variable quadratic
    terms are accumulated in numpy arrays, constraint triplets in flat lists."""

    def __init__(self, n_core: int):
        self.n_core = n_core
        self.n = n_core
        self.p_diag_core = np.zeros(n_core)
        self.q_core = np.zeros(n_core)
        self.p_diag_slack: list[float] = []
        self.q_slack: list[float] = []
        self.p_rows: list[int] = []
        self.p_cols: list[int] = []
        self.p_vals: list[float] = []
        self.eq_rows: list[int] = []
        self.eq_cols: list[int] = []
        self.eq_vals: list[float] = []
        self.b_eq: list[float] = []
        self.n_eq = 0
        self.in_rows: list[int] = []
        self.in_cols: list[int] = []
        self.in_vals: list[float] = []
        self.b_in: list[float] = []
        self.n_in = 0
        self.slack_families: list[str] = []  # per slack variable
        self.row_keys: list[tuple] = []  # stable ineq-row identities for dual warm starts

    def new_slack(self, family: str, w_lin: float, w_quad: float, key: tuple = ()) -> int:
        idx = self.n
        self.n += 1
        self.p_diag_slack.append(2.0 * w_quad)
        self.q_slack.append(w_lin)
        self.slack_families.append(family)
        # nonnegativity: -s <= 0
        self.add_ineq([idx], [-1.0], 0.0, key=("snn",) + key)
        return idx

    def add_quad(self, idx: int, w: float, target: float = 0.0):
        self.p_diag_core[idx] += 2.0 * w
        if target != 0.0:
            self.q_core[idx] -= 2.0 * w * target

    def add_quad_vec(self, idx: np.ndarray, w: float, targets: np.ndarray):
        """w * (z_i - target_i)^2 over an index vector of core variables."""
        np.add.at(self.p_diag_core, idx, 2.0 * w)
        np.subtract.at(self.q_core, idx, 2.0 * w * targets)

    def add_quad_diff_vec(self, i: np.ndarray, j: np.ndarray, w: float, offsets: np.ndarray):
        """w * (z_i - z_j + offset)^2 elementwise over index vectors."""
        np.add.at(self.p_diag_core, i, 2.0 * w)
        np.add.at(self.p_diag_core, j, 2.0 * w)
        self.p_rows += i.tolist() + j.tolist()
        self.p_cols += j.tolist() + i.tolist()
        self.p_vals += [-2.0 * w] * (2 * len(i))
        np.add.at(self.q_core, i, 2.0 * w * offsets)
        np.subtract.at(self.q_core, j, 2.0 * w * offsets)

    def add_eq(self, cols, vals, rhs: float):
        r = self.n_eq
        self.n_eq += 1
        self.eq_rows += [r] * len(cols)
        self.eq_cols += list(cols)
        self.eq_vals += list(vals)
        self.b_eq.append(rhs)

    def add_eq_bulk(self, rows, cols, vals, rhs):
        """Append pre-assembled equality triplets (rows are 0-based local)."""
        base = self.n_eq
        self.eq_rows += (np.asarray(rows) + base).tolist()
        self.eq_cols += list(cols)
        self.eq_vals += list(vals)
        self.b_eq += list(rhs)
        self.n_eq += len(rhs)

    def add_ineq(self, cols, vals, rhs: float, key: tuple = ()):
        r = self.n_in
        self.n_in += 1
        self.in_rows += [r] * len(cols)
        self.in_cols += list(cols)
        self.in_vals += list(vals)
        self.b_in.append(rhs)
        self.row_keys.append(key)

    def finish(self, layout: dict[str, slice]) -> qpmod.QuadProgram:
        n = self.n
        p_diag = np.concatenate([self.p_diag_core, np.array(self.p_diag_slack)])
        q = np.concatenate([self.q_core, np.array(self.q_slack)])
        rows = np.concatenate([np.arange(n), np.array(self.p_rows, dtype=int)])
        cols = np.concatenate([np.arange(n), np.array(self.p_cols, dtype=int)])
        vals = np.concatenate([p_diag, np.array(self.p_vals)])
        P = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
        A_eq = sp.coo_matrix(
            (self.eq_vals, (self.eq_rows, self.eq_cols)), shape=(self.n_eq, n)
        ).tocsc()
        A_in = sp.coo_matrix(
            (self.in_vals, (self.in_rows, self.in_cols)), shape=(self.n_in, n)
        ).tocsc()
        return qpmod.QuadProgram(
            P=P,
            q=q,
            A_eq=A_eq,
            b_eq=np.array(self.b_eq),
            A_in=A_in,
            b_in=np.array(self.b_in),
            variable_layout=layout,
        )


def _footprint_at(slot_or_agent_footprint, x: float, y: float, heading: float):
    fp = slot_or_agent_footprint
    if isinstance(fp, OrientedBox):
        return OrientedBox(Pose2(x, y, heading), fp.half_length, fp.half_width)
    return Disc(center=(x, y), radius=fp.radius)


@dataclass
class _BuildInfo:
    layout: dict[str, slice]
    n_core: int
    slack_families: list[str]
    row_keys: list[tuple] = field(default_factory=list)
    n_pruned: int = 0


def _heading_col(slot_idx_x):
    """Column of the heading entry inside a vehicle state."""
    return slot_idx_x + 3


def build_joint_qp(
    candidate: HomotopyCandidate,
    scene: SceneSnapshot,
    reference: Reference,
    ec_ids: tuple[str, ...],
    frozen_ids: tuple[str, ...],
    config: PlannerConfig,
    slots: list[_Slot] | None = None,
    z_prev: np.ndarray | None = None,
    prediction: JointPrediction | None = None,
) -> tuple[qpmod.QuadProgram, _BuildInfo, list[_Slot]]:
    """Assemble the joint MPC QP around the given linearization trajectories.

    Decision variables are DELTAS from the linearization trajectories (the
    standard SQP parametrization), which keeps the problem well scaled even
    with far-away dummy agents; the caller adds the linearization back.

    ``slots`` defaults to the candidate's own initialization (first SQP round);
    ``z_prev`` (full-value core vector) anchors the proximal term, defaulting
    to the linearization itself.
    """
    T = config.horizon_steps
    dt = config.dt
    if slots is None:
        slots = _build_slots(candidate, scene, ec_ids, config)

    block = _slot_block(T)
    n_core = block * len(slots)
    layout: dict[str, slice] = {}
    for k, slot in enumerate(slots):
        base = k * block
        layout[f"{slot.name}_x"] = slice(base, base + (T + 1) * NX)
        layout[f"{slot.name}_u"] = slice(base + (T + 1) * NX, base + block)

    def xi(k: int, t: int) -> int:
        return k * block + t * NX

    def ui(k: int, t: int) -> int:
        return k * block + (T + 1) * NX + t * NU

    b = _Builder(n_core)

    ref_xy = reference.trajectory.xy
    ref_psi = reference.trajectory.headings
    ref_v = reference.speeds

    # --- costs (targets expressed as deltas from the linearization) --------
    for k, slot in enumerate(slots):
        eta = config.eta_e if k == 0 else config.eta_o
        base = k * block
        iu0 = base + (T + 1) * NX
        u_idx = iu0 + np.arange(T * NU)
        b.add_quad_vec(u_idx, eta * config.w_u_accel, -slot.inputs.ravel())
        if T > 1:
            du = np.diff(slot.inputs, axis=0).ravel()
            b.add_quad_diff_vec(
                u_idx[NU:], u_idx[:-NU], eta * config.w_u_jerk, du
            )
        x_rows = slot.states[1 : T + 1]
        if k == 0:
            idx_x = base + NX * np.arange(1, T + 1)
            b.add_quad_vec(idx_x, config.eta_e * config.w_ref, ref_xy[1 : T + 1, 0] - x_rows[:, 0])
            b.add_quad_vec(idx_x + 1, config.eta_e * config.w_ref, ref_xy[1 : T + 1, 1] - x_rows[:, 1])
            psi_err = np.array(
                [wrap_angle(x_rows[i, 3] - ref_psi[i + 1]) for i in range(T)]
            )
            b.add_quad_vec(
                idx_x + 3, config.eta_e * config.w_ref * REF_HEADING_WEIGHT, -psi_err
            )
            b.add_quad_vec(
                idx_x + 2,
                config.eta_e * config.w_ref * REF_SPEED_WEIGHT,
                ref_v[1 : T + 1] - x_rows[:, 2],
            )
        else:
            idx_x = base + NX * np.arange(1, T + 1)
            b.add_quad_vec(idx_x, config.eta_o * config.w_dev, slot.pred_xy[:T, 0] - x_rows[:, 0])
            b.add_quad_vec(idx_x + 1, config.eta_o * config.w_dev, slot.pred_xy[:T, 1] - x_rows[:, 1])
        if config.proximal_weight > 0.0:
            idx_all = base + np.arange(block)
            if z_prev is None:
                anchor = np.zeros(block)
            else:
                lin_full = np.concatenate([slot.states.ravel(), slot.inputs.ravel()])
                anchor = z_prev[base : base + block] - lin_full
            b.add_quad_vec(idx_all, config.proximal_weight, anchor)

    # --- initial state and dynamics rows (exactly zero rhs in delta form) ---
    for k, slot in enumerate(slots):
        base = k * block
        rows_l, cols_l, vals_l = [], [], []
        r = 0
        for d in range(NX):
            rows_l.append(r)
            cols_l.append(xi(k, 0) + d)
            vals_l.append(1.0)
            r += 1
        if slot.is_vehicle:
            cos_h = np.cos(slot.states[:T, 3])
            sin_h = np.sin(slot.states[:T, 3])
            v_lin = slot.states[:T, 2]
        for t in range(T):
            x_t = xi(k, t)
            x_n = xi(k, t + 1)
            u_t = ui(k, t)
            if slot.is_vehicle:
                c, s, v = cos_h[t], sin_h[t], v_lin[t]
                rows_l += [r, r, r, r]
                cols_l += [x_n + 0, x_t + 0, x_t + 2, x_t + 3]
                vals_l += [1.0, -1.0, -c * dt, v * s * dt]
                rows_l += [r + 1, r + 1, r + 1, r + 1]
                cols_l += [x_n + 1, x_t + 1, x_t + 2, x_t + 3]
                vals_l += [1.0, -1.0, -s * dt, -v * c * dt]
            else:
                rows_l += [r, r, r]
                cols_l += [x_n + 0, x_t + 0, x_t + 2]
                vals_l += [1.0, -1.0, -dt]
                rows_l += [r + 1, r + 1, r + 1]
                cols_l += [x_n + 1, x_t + 1, x_t + 3]
                vals_l += [1.0, -1.0, -dt]
            rows_l += [r + 2, r + 2, r + 2]
            cols_l += [x_n + 2, x_t + 2, u_t + 0]
            vals_l += [1.0, -1.0, -dt]
            rows_l += [r + 3, r + 3, r + 3]
            cols_l += [x_n + 3, x_t + 3, u_t + 1]
            vals_l += [1.0, -1.0, -dt]
            r += 4
        b.add_eq_bulk(rows_l, cols_l, vals_l, [0.0] * r)

    # --- state/input bound rows -------------------------------------------
    limits = config.limits
    k_steer = limits.max_yaw_rate_per_speed
    for k, slot in enumerate(slots):
        if slot.is_dummy:
            continue  # stationary far-away padding; bounds are vacuous
        if slot.is_vehicle:
            for t in range(T):
                x_t = xi(k, t)
                u_t = ui(k, t)
                v_bar = slot.states[t, 2]
                w_bar = slot.inputs[t, 1]
                a_bar = slot.inputs[t, 0]
                if t > 0:
                    b.add_ineq([x_t + 2], [1.0], limits.v_max - v_bar, key=("lim", k, t, 0))
                    b.add_ineq([x_t + 2], [-1.0], v_bar - limits.v_min, key=("lim", k, t, 1))
                b.add_ineq([u_t + 0], [1.0], limits.a_x_max - a_bar, key=("lim", k, t, 2))
                b.add_ineq([u_t + 0], [-1.0], a_bar - limits.a_x_min, key=("lim", k, t, 3))
                vw = v_bar * w_bar
                b.add_ineq(
                    [x_t + 2, u_t + 1], [w_bar, v_bar],
                    limits.a_y_max - vw, key=("lim", k, t, 4),
                )
                b.add_ineq(
                    [x_t + 2, u_t + 1], [-w_bar, -v_bar],
                    limits.a_y_max + vw, key=("lim", k, t, 5),
                )
                steer_slack = k_steer * v_bar
                b.add_ineq(
                    [x_t + 2, u_t + 1], [-k_steer, 1.0],
                    steer_slack - w_bar, key=("lim", k, t, 6),
                )
                b.add_ineq(
                    [x_t + 2, u_t + 1], [-k_steer, -1.0],
                    steer_slack + w_bar, key=("lim", k, t, 7),
                )
            v_T = float(slot.states[T, 2])
            b.add_ineq([xi(k, T) + 2], [1.0], limits.v_max - v_T, key=("limT", k, 0))
            b.add_ineq([xi(k, T) + 2], [-1.0], v_T - limits.v_min, key=("limT", k, 1))
        else:
            for t in range(T):
                rows = pedestrian_limit_rows(
                    PedestrianState(*slot.states[t]), limits, include_state_bounds=t > 0
                )
                slack_lin = rows.G_x @ slot.states[t] + rows.G_u @ slot.inputs[t]
                for r in range(len(rows.g)):
                    cols = [xi(k, t) + d for d in range(NX) if rows.G_x[r, d] != 0.0]
                    vals = [rows.G_x[r, d] for d in range(NX) if rows.G_x[r, d] != 0.0]
                    cols += [ui(k, t) + d for d in range(NU) if rows.G_u[r, d] != 0.0]
                    vals += [rows.G_u[r, d] for d in range(NU) if rows.G_u[r, d] != 0.0]
                    b.add_ineq(
                        cols, vals, float(rows.g[r] - slack_lin[r]), key=("lim", k, t, r)
                    )
            ped_rows = pedestrian_limit_rows(
                PedestrianState(*slot.states[T]), limits, include_state_bounds=True
            )
            slack_lin = ped_rows.G_x @ slot.states[T]
            for r in range(len(ped_rows.g)):
                if not np.any(ped_rows.G_x[r]):
                    continue
                cols = [xi(k, T) + d for d in range(NX) if ped_rows.G_x[r, d] != 0.0]
                vals = [ped_rows.G_x[r, d] for d in range(NX) if ped_rows.G_x[r, d] != 0.0]
                b.add_ineq(cols, vals, float(ped_rows.g[r] - slack_lin[r]), key=("limT", k, r))

    info = _BuildInfo(layout=layout, n_core=n_core, slack_families=b.slack_families)

    # --- pairwise collision rows (EC slots are variables) ------------------
    def pose_of(slot: _Slot, t: int) -> tuple[float, float, float]:
        s = slot.states[t]
        heading = s[3] if slot.is_vehicle else math.atan2(s[3], s[2]) if abs(s[2]) + abs(s[3]) > 1e-9 else 0.0
        return s[0], s[1], heading

    def add_pair_rows(ka: int, kb: int, t: int):
        slot_a, slot_b = slots[ka], slots[kb]
        ax, ay, ah = pose_of(slot_a, t)
        bx, by, bh = pose_of(slot_b, t)
        # cheap distance gate before the full margin computation
        if math.hypot(ax - bx, ay - by) > config.prune_margin + 8.0:
            info.n_pruned += 1
            return
        fa = _footprint_at(slot_a.footprint, ax, ay, ah)
        fb = _footprint_at(slot_b.footprint, bx, by, bh)
        rows = _pair_rows(fa, fb)
        if rows is None:
            return
        margins, grads_a, grads_b = rows
        if margins.min() > config.prune_margin:
            info.n_pruned += 1
            return
        # agents get no heading gradient: rotating a box is a linearization
        # exploit (it thins the footprint without moving it)
        if ka > 0:
            grads_a = grads_a.copy()
            grads_a[:, 2] = 0.0
        if kb > 0:
            grads_b = grads_b.copy()
            grads_b[:, 2] = 0.0
        s_idx = b.new_slack(
            "collision", config.w_slack_collision, config.w_slack_collision,
            key=("col", ka, kb, t),
        )
        dims_a = (0, 1, 3) if slot_a.is_vehicle else (0, 1)
        dims_b = (0, 1, 3) if slot_b.is_vehicle else (0, 1)
        for r in range(len(margins)):
            ga = grads_a[r][: len(dims_a)]
            gb = grads_b[r][: len(dims_b)]
            cols = [xi(ka, t) + dims_a[d] for d in range(len(dims_a))]
            vals = [-ga[d] for d in range(len(dims_a))]
            cols += [xi(kb, t) + dims_b[d] for d in range(len(dims_b))]
            vals += [-gb[d] for d in range(len(dims_b))]
            cols.append(s_idx)
            vals.append(-1.0)
            b.add_ineq(
                cols, vals, float(margins[r] - config.collision_buffer),
                key=("col", ka, kb, t, r),
            )

    def add_frozen_rows(k: int, frozen_fp, frozen_xy: np.ndarray, frozen_heading: float, t: int, frozen_key: str = ""):
        slot = slots[k]
        ax, ay, ah = pose_of(slot, t)
        if math.hypot(ax - frozen_xy[0], ay - frozen_xy[1]) > config.prune_margin + 8.0:
            info.n_pruned += 1
            return
        fa = _footprint_at(slot.footprint, ax, ay, ah)
        fb = _footprint_at(frozen_fp, frozen_xy[0], frozen_xy[1], frozen_heading)
        rows = _pair_rows(fa, fb)
        if rows is None:
            return
        margins, grads_a, _ = rows
        if margins.min() > config.prune_margin:
            info.n_pruned += 1
            return
        s_idx = b.new_slack(
            "collision", config.w_slack_collision, config.w_slack_collision,
            key=("colf", frozen_key, t),
        )
        dims = (0, 1, 3) if slot.is_vehicle else (0, 1)
        for r in range(len(margins)):
            ga = grads_a[r][: len(dims)]
            cols = [xi(k, t) + dims[d] for d in range(len(dims))] + [s_idx]
            vals = [-ga[d] for d in range(len(dims))] + [-1.0]
            b.add_ineq(
                cols, vals, float(margins[r] - config.collision_buffer),
                key=("colf", frozen_key, t, r),
            )

    for t in range(1, T + 1):
        for kb in range(1, len(slots)):
            add_pair_rows(0, kb, t)
        for ka in range(1, len(slots)):
            for kb in range(ka + 1, len(slots)):
                if slots[ka].is_dummy and slots[kb].is_dummy:
                    continue
                add_pair_rows(ka, kb, t)

    # ego vs frozen (non-EC) predicted trajectories
    frozen_sources = []
    if frozen_ids:
        if config.constrain_all_prediction_samples and prediction is not None:
            frozen_sources = [s for s in prediction.samples]
        else:
            frozen_sources = [candidate.agents_pred]
    for source in frozen_sources:
        for agent_id in frozen_ids:
            traj = source.get(agent_id)
            if traj is None:
                continue
            agent = scene.agent_by_id(agent_id)
            for t in range(1, T + 1):
                idx = min(t - 1, len(traj) - 1)
                add_frozen_rows(0, agent.footprint, traj.xy[idx], traj.headings[idx], t, agent_id)

    # --- lane boundary rows -------------------------------------------------
    lanes = scene.lanes
    for k, slot in enumerate(slots):
        if not slot.is_vehicle:
            continue
        family = "lane" if k == 0 else "lane_agents"
        w_slack = config.w_slack_lane * (1.0 if k == 0 else AGENT_LANE_SLACK_FACTOR)
        half_width = (
            slot.footprint.half_width
            if isinstance(slot.footprint, OrientedBox)
            else slot.footprint.radius
        )
        for t in range(1, T + 1):
            p = slot.states[t, 0:2]
            if k == 0:
                left, right = reference.boundaries[min(t, len(reference.boundaries) - 1)]
            else:
                if lanes is None or not getattr(lanes, "lanes", None):
                    break
                hit = lanes.nearest_lane(p)
                if hit is None:
                    break
                lane = lanes.lanes[hit[0]]
                if abs(hit[1].signed_lateral) > 6.0:
                    continue
                left, right = lane.left_boundary, lane.right_boundary
            rows = []
            proj_l = project_to_polyline(p, left)
            seg = left.xy[proj_l.segment_index + 1] - left.xy[proj_l.segment_index]
            d = seg / np.linalg.norm(seg)
            rows.append((-proj_l.signed_lateral - half_width, -perp(d)))
            proj_r = project_to_polyline(p, right)
            seg = right.xy[proj_r.segment_index + 1] - right.xy[proj_r.segment_index]
            d = seg / np.linalg.norm(seg)
            rows.append((proj_r.signed_lateral - half_width, perp(d)))
            s_idx = b.new_slack(family, w_slack, w_slack, key=("lane", k, t))
            for side, (margin, grad) in enumerate(rows):
                b.add_ineq(
                    [xi(k, t) + 0, xi(k, t) + 1, s_idx],
                    [-grad[0], -grad[1], -1.0],
                    float(margin),
                    key=("lane", k, t, side),
                )

    # --- optional linearized homotopy rows ----------------------------------
    if config.enforce_homotopy_constraint and candidate.mode_vector is not None:
        hcfg = HomotopyConfig(theta_hat=config.theta_hat)
        for agent_id, mode in zip(
            candidate.mode_vector.obstacle_ids, candidate.mode_vector.modes
        ):
            k = next((i for i, s in enumerate(slots) if s.name == agent_id), None)
            if k is None:
                continue
            lo, hi = mode_interval(mode, hcfg)
            ego_xy_lin = slots[0].states[:, 0:2]
            obs_xy_lin = slots[k].states[:, 0:2]
            rel = ego_xy_lin - obs_xy_lin
            norms = np.linalg.norm(rel, axis=1)
            if norms.min() < 1e-6:
                continue
            bearings = np.arctan2(rel[:, 1], rel[:, 0])
            inc = np.diff(bearings)
            inc = (inc + math.pi) % (2.0 * math.pi) - math.pi
            d_theta = float(inc.sum())
            r_T = rel[-1]
            g = perp(r_T) / float(r_T @ r_T)
            pad = min(0.05, (hi - lo) / 4.0)
            cols = [xi(0, T) + 0, xi(0, T) + 1, xi(k, T) + 0, xi(k, T) + 1]
            if d_theta <= hi - pad:
                b.add_ineq(
                    cols, [g[0], g[1], -g[0], -g[1]], float(hi - pad - d_theta),
                    key=("hom", agent_id, 0),
                )
            if d_theta >= lo + pad:
                b.add_ineq(
                    cols, [-g[0], -g[1], g[0], g[1]], float(d_theta - lo - pad),
                    key=("hom", agent_id, 1),
                )

    info.slack_families = b.slack_families
    info.row_keys = b.row_keys
    layout["slack"] = slice(n_core, b.n)
    problem = b.finish(layout)
    return problem, info, slots


def _pair_rows(fa, fb):
    """Collision rows for a footprint pair at linearization poses.

    Returns (margins, grads_a, grads_b) with gradients over (x, y, heading)
    for boxes and (x, y) zero-padded for discs.
    """
    if isinstance(fa, OrientedBox) and isinstance(fb, OrientedBox):
        res = box_box_constraints(fa, fb)
        return res.row_margins, res.grad_a, res.grad_b
    if isinstance(fa, OrientedBox) and isinstance(fb, Disc):
        res = box_disc_margin(fa, fb)
        return (
            np.array([res.margin]),
            res.grad_box[None, :],
            np.array([[res.grad_disc[0], res.grad_disc[1], 0.0]]),
        )
    if isinstance(fa, Disc) and isinstance(fb, OrientedBox):
        res = box_disc_margin(fb, fa)
        return (
            np.array([res.margin]),
            np.array([[res.grad_disc[0], res.grad_disc[1], 0.0]]),
            res.grad_box[None, :],
        )
    # disc-disc
    d = fb.xy - fa.xy
    dist = float(np.linalg.norm(d))
    n = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
    margin = dist - fa.radius - fb.radius
    return (
        np.array([margin]),
        np.array([[-n[0], -n[1], 0.0]]),
        np.array([[n[0], n[1], 0.0]]),
    )


def _reroll_slot(slot: _Slot, inputs: np.ndarray, dt: float) -> np.ndarray:
    if slot.is_vehicle:
        states = rollout_vehicle(slot.x0, inputs, dt)
        states[:, 3] = np.unwrap(states[:, 3])
        # rebase onto the initial heading branch
        states[:, 3] += slot.x0[3] - states[0, 3]
    else:
        states = rollout_pedestrian(slot.x0, inputs, dt)
    return states


def _exact_margin(fa, fb) -> float:
    if isinstance(fa, OrientedBox) and isinstance(fb, OrientedBox):
        return box_box_constraints(fa, fb).margin
    if isinstance(fa, OrientedBox) and isinstance(fb, Disc):
        return box_disc_margin(fa, fb).margin
    if isinstance(fa, Disc) and isinstance(fb, OrientedBox):
        return box_disc_margin(fb, fa).margin
    return float(np.linalg.norm(fb.xy - fa.xy)) - fa.radius - fb.radius


def _measured_violations(
    slots: list[_Slot],
    candidate: HomotopyCandidate,
    scene: SceneSnapshot,
    reference: Reference,
    frozen_ids: tuple[str, ...],
    config: PlannerConfig,
) -> tuple[float, float]:
    """Worst constraint violation of the re-simulated trajectories: collision
    margin deficit and ego lane-boundary deficit."""
    T = config.horizon_steps
    coll = 0.0

    def fp(slot: _Slot, t: int):
        s = slot.states[t]
        heading = s[3] if slot.is_vehicle else 0.0
        return _footprint_at(slot.footprint, s[0], s[1], heading)

    for t in range(1, T + 1):
        for ka in range(len(slots)):
            for kb in range(ka + 1, len(slots)):
                if slots[ka].is_dummy and slots[kb].is_dummy:
                    continue
                pa = slots[ka].states[t, 0:2]
                pb = slots[kb].states[t, 0:2]
                if np.linalg.norm(pa - pb) > 25.0:
                    continue
                coll = max(coll, -_exact_margin(fp(slots[ka], t), fp(slots[kb], t)))
        for agent_id in frozen_ids:
            traj = candidate.agents_pred.get(agent_id)
            if traj is None:
                continue
            agent = scene.agent_by_id(agent_id)
            idx = min(t - 1, len(traj) - 1)
            if np.linalg.norm(slots[0].states[t, 0:2] - traj.xy[idx]) > 25.0:
                continue
            ofp = _footprint_at(agent.footprint, traj.xy[idx][0], traj.xy[idx][1], traj.headings[idx])
            coll = max(coll, -_exact_margin(fp(slots[0], t), ofp))

    lane = 0.0
    half_width = scene.ego_footprint.half_width
    for t in range(1, T + 1):
        p = slots[0].states[t, 0:2]
        left, right = reference.boundaries[min(t, len(reference.boundaries) - 1)]
        lane = max(lane, project_to_polyline(p, left).signed_lateral + half_width)
        lane = max(lane, -project_to_polyline(p, right).signed_lateral + half_width)
    return coll, max(lane, 0.0)


def _nonlinear_costs(
    slots: list[_Slot], reference: Reference, config: PlannerConfig
) -> dict[str, float]:
    T = config.horizon_steps
    ego = slots[0]
    ref_xy = reference.trajectory.xy
    ref_psi = reference.trajectory.headings
    ref_v = reference.speeds
    pos_err = ego.states[1 : T + 1, 0:2] - ref_xy[1 : T + 1]
    psi_err = np.array(
        [wrap_angle(ego.states[t, 3] - ref_psi[t]) for t in range(1, T + 1)]
    )
    v_err = ego.states[1 : T + 1, 2] - ref_v[1 : T + 1]
    j_ref = config.w_ref * float(
        np.einsum("ij,ij->", pos_err, pos_err)
        + REF_HEADING_WEIGHT * psi_err @ psi_err
        + REF_SPEED_WEIGHT * v_err @ v_err
    )

    def j_u(inputs: np.ndarray) -> float:
        cost = config.w_u_accel * float(np.einsum("ij,ij->", inputs, inputs))
        if len(inputs) > 1:
            d = np.diff(inputs, axis=0)
            cost += config.w_u_jerk * float(np.einsum("ij,ij->", d, d))
        return cost

    j_u_ego = j_u(ego.inputs)
    j_dev = 0.0
    j_u_agents = 0.0
    for slot in slots[1:]:
        dev = slot.states[1 : T + 1, 0:2] - slot.pred_xy[:T]
        j_dev += config.w_dev * float(np.einsum("ij,ij->", dev, dev))
        j_u_agents += j_u(slot.inputs)
    total = config.eta_e * (j_ref + j_u_ego) + config.eta_o * (j_dev + j_u_agents)
    return {
        "j_ref": j_ref,
        "j_u_ego": j_u_ego,
        "j_dev": j_dev,
        "j_u_agents": j_u_agents,
        "total": total,
    }


def sqp_solve(
    candidate: HomotopyCandidate,
    scene: SceneSnapshot,
    reference: Reference,
    ec_ids: tuple[str, ...],
    frozen_ids: tuple[str, ...],
    config: PlannerConfig,
    prediction: JointPrediction | None = None,
    dual_cache: dict | None = None,
) -> JointPlan:
    """R rounds of linearize+solve; between rounds the linearization is
    re-rolled through the nonlinear dynamics with the solved inputs.

    ``dual_cache`` maps stable row keys to multipliers from earlier solves of
    structurally similar problems (previous rounds, sibling candidates,
    previous planning cycles); it is read for warm starts and updated in
    place with this candidate's final multipliers.
    """
    T = config.horizon_steps
    dt = config.dt
    slots = _build_slots(candidate, scene, ec_ids, config)
    z_prev = None
    sol = None
    info = None
    prev_keys = None
    lin_gap = 0.0
    status = "OPTIMAL"
    build_time = 0.0
    solve_time = 0.0
    for _ in range(max(config.sqp_rounds, 1)):
        t0 = time.perf_counter()
        problem, info, slots = build_joint_qp(
            candidate, scene, reference, ec_ids, frozen_ids, config,
            slots=slots, z_prev=z_prev, prediction=prediction,
        )
        build_time += time.perf_counter() - t0
        # delta form: the linearization trajectory is the zero vector
        x0 = np.zeros(problem.n)
        nu0 = np.zeros(problem.n_eq)
        lam0 = np.zeros(problem.n_in)
        if sol is not None and sol.duals_eq.shape == (problem.n_eq,):
            nu0 = sol.duals_eq
        source = None
        if sol is not None and prev_keys is not None:
            source = dict(zip(prev_keys, sol.duals_in))
        elif dual_cache:
            source = dual_cache
        if source:
            lam0 = np.array([source.get(key, 0.0) for key in info.row_keys])
        prev_keys = info.row_keys
        t0 = time.perf_counter()
        sol = qpmod.solve(
            problem,
            tol_primal=config.qp_tol,
            tol_dual=10.0 * config.qp_tol,
            max_iter=config.qp_max_iter,
            warm_start=(x0, nu0, lam0),
            polish=True,
        )
        solve_time += time.perf_counter() - t0
        if sol.status is qpmod.QpStatus.MAX_ITER:
            status = "MAX_ITER"
        block = _slot_block(T)
        gap = 0.0
        max_delta = float(np.abs(sol.z[: info.n_core]).max()) if info.n_core else 0.0
        z_prev = np.empty(info.n_core)
        for k, slot in enumerate(slots):
            base = k * block
            qp_states = slot.states + sol.z[base : base + (T + 1) * NX].reshape(T + 1, NX)
            qp_inputs = slot.inputs + sol.z[base + (T + 1) * NX : base + block].reshape(T, NU)
            z_prev[base : base + (T + 1) * NX] = qp_states.ravel()
            z_prev[base + (T + 1) * NX : base + block] = qp_inputs.ravel()
            new_states = _reroll_slot(slot, qp_inputs, dt)
            slot.states = new_states
            slot.inputs = qp_inputs.copy()
            gap = max(gap, float(np.linalg.norm(new_states[:, 0:2] - qp_states[:, 0:2], axis=1).max()))
        lin_gap = gap
        # the SQP has reached its fixed point: further rounds would rebuild
        # the same problem and return the same solution
        if max_delta < 5.0e-4:
            break
        # a candidate stuck deep in penetration won't be selected; don't
        # spend the remaining rounds on it
        slack_now = 0.0
        for fam, val in zip(info.slack_families, sol.z[info.n_core :]):
            if fam == "collision":
                slack_now = max(slack_now, float(val))
        if slack_now - config.collision_buffer > 4.0 * config.slack_threshold_collision:
            break

    if dual_cache is not None and info is not None:
        dual_cache.clear()
        dual_cache.update(zip(info.row_keys, sol.duals_in))

    slack_coll_qp = 0.0
    slack_lane_qp = 0.0
    slack_lane_agents = 0.0
    slack_vals = sol.z[info.n_core :]
    for fam, val in zip(info.slack_families, slack_vals):
        if fam == "collision":
            slack_coll_qp = max(slack_coll_qp, float(val))
        elif fam == "lane":
            slack_lane_qp = max(slack_lane_qp, float(val))
        else:
            slack_lane_agents = max(slack_lane_agents, float(val))
    coll_meas, lane_meas = _measured_violations(
        slots, candidate, scene, reference, frozen_ids, config
    )

    costs = _nonlinear_costs(slots, reference, config)
    ego_slot = slots[0]
    ego_traj = DiscreteTrajectory(
        xy=ego_slot.states[:, 0:2],
        headings=np.array([wrap_angle(a) for a in ego_slot.states[:, 3]]),
        dt=dt,
        agent_id="ego",
        speeds=ego_slot.states[:, 2],
    )
    agents = {}
    agent_inputs = {}
    for slot in slots[1:]:
        if slot.is_dummy:
            continue
        if slot.is_vehicle:
            headings = np.array([wrap_angle(a) for a in slot.states[:, 3]])
            speeds = slot.states[:, 2]
        else:
            speeds = np.linalg.norm(slot.states[:, 2:4], axis=1)
            headings = np.arctan2(slot.states[:, 3], slot.states[:, 2])
            headings[speeds < 1e-9] = 0.0
        agents[slot.name] = DiscreteTrajectory(
            xy=slot.states[:, 0:2], headings=headings, dt=dt,
            agent_id=slot.name, speeds=speeds,
        )
        agent_inputs[slot.name] = slot.inputs.copy()

    preserved = True
    if candidate.mode_vector is not None and len(candidate.mode_vector):
        hcfg = HomotopyConfig(theta_hat=config.theta_hat)
        preserved_modes = []
        try:
            ego_future = DiscreteTrajectory(
                xy=ego_traj.xy[1:], headings=ego_traj.headings[1:], dt=dt, agent_id="ego"
            )
            for agent_id in candidate.mode_vector.obstacle_ids:
                obs = candidate.agents_pred[agent_id]
                d = angular_distance(ego_future, obs)
                preserved_modes.append(mode_of(d, hcfg))
            preserved = tuple(preserved_modes) == candidate.mode_vector.modes
        except Exception:
            preserved = False

    return JointPlan(
        ego=ego_traj,
        ego_inputs=ego_slot.inputs.copy(),
        agents=agents,
        agent_inputs=agent_inputs,
        cost_breakdown=costs,
        slack_usage={
            # collision slack within the buffer band is priced, not unsafe;
            # the reported usage is true penetration
            "collision": max(slack_coll_qp - config.collision_buffer, coll_meas, 0.0),
            "lane": max(slack_lane_qp, lane_meas),
            "lane_agents": slack_lane_agents,
            "proximity": slack_coll_qp,
        },
        mode_vector=candidate.mode_vector,
        qp_status=status,
        lin_gap=lin_gap,
        reward=candidate.reward,
        prediction_index=candidate.prediction_index,
        preserved_mode=preserved,
        build_time=build_time,
        solve_time=solve_time,
    )


def _fallback_plan(scene: SceneSnapshot, config: PlannerConfig) -> JointPlan:
    """Maximum-braking straight-line plan used when no candidate exists."""
    T = config.horizon_steps
    dt = config.dt
    inputs = np.zeros((T, NU))
    v = scene.ego_state.v
    for t in range(T):
        a = max(config.limits.a_x_min, -v / dt)
        inputs[t, 0] = a
        v = max(v + a * dt, 0.0)
    states = rollout_vehicle(scene.ego_state.as_array(), inputs, dt)
    traj = DiscreteTrajectory(
        xy=states[:, 0:2], headings=states[:, 3], dt=dt, agent_id="ego", speeds=states[:, 2]
    )
    return JointPlan(
        ego=traj,
        ego_inputs=inputs,
        agents={},
        agent_inputs={},
        cost_breakdown={"total": math.inf},
        slack_usage={"collision": 0.0, "lane": 0.0, "lane_agents": 0.0},
        mode_vector=None,
        qp_status="FALLBACK",
        degraded=True,
    )


def plan(
    scene: SceneSnapshot,
    reference: Reference,
    lanes,
    config: PlannerConfig,
    warm_cache: dict | None = None,
) -> tuple[JointPlan, PlanDiagnostics]:
    """Full planning cycle: predict, sample, select homotopy candidates, solve
    the joint MPC per candidate, and pick the lowest-cost feasible plan.

    ``warm_cache`` (optional, mutated in place) carries dual warm-start data
    across calls; receding-horizon callers pass one persistent dict."""
    timings: dict[str, float] = {}
    t_start = time.perf_counter()
    if scene.lanes is None and lanes is not None:
        scene = replace(scene, lanes=lanes)

    t0 = time.perf_counter()
    prediction = predict(
        scene,
        config.predictor,
        horizon=config.horizon,
        dt=config.dt,
        n_samples=config.n_prediction_samples,
        seed=config.seed,
    )
    prediction = align_prediction(prediction, config.horizon, config.dt)
    timings["predict"] = time.perf_counter() - t0

    partition = classify_agents(scene, prediction, config.n_ec, config.n_nonec)
    if config.mode == "ijp":
        ec_ids = partition.ec_ids
        frozen_ids = partition.non_ec_ids
    else:
        ec_ids = ()
        frozen_ids = partition.ec_ids + partition.non_ec_ids

    t0 = time.perf_counter()
    ref_speed = float(np.mean(reference.speeds)) if len(reference.speeds) else scene.ego_state.v
    lattice = default_lattice(
        max(scene.ego_state.v, ref_speed), config.limits, config.horizon, config.dt
    )
    lattice = SampleLattice(
        lateral_offsets=config.lattice_offsets,
        terminal_speeds=lattice.terminal_speeds,
        horizon=config.horizon,
        dt=config.dt,
    )
    try:
        samples = sample_ego(scene, reference, lattice, config.limits)
    except Exception:
        samples = []
    timings["sample"] = time.perf_counter() - t0

    footprints = {a.agent_id: a.footprint for a in scene.agents}
    ego_radius = math.hypot(
        scene.ego_footprint.half_length, scene.ego_footprint.half_width
    )
    t0 = time.perf_counter()
    candidates: list[HomotopyCandidate] = []
    if samples:
        try:
            candidates = select_candidates(
                samples,
                prediction,
                HomotopyConfig(theta_hat=config.theta_hat),
                config.k_max,
                reference,
                ec_ids=partition.ec_ids,
                footprints=footprints,
                ego_radius=ego_radius,
            )
        except NoValidCandidateError:
            candidates = []
    timings["select"] = time.perf_counter() - t0

    if not candidates:
        fb = _fallback_plan(scene, config)
        timings["build"] = 0.0
        timings["solve"] = 0.0
        timings["total"] = time.perf_counter() - t_start
        timings["other"] = timings["total"] - sum(
            timings[k] for k in ("predict", "sample", "select", "build", "solve")
        )
        return fb, PlanDiagnostics(
            timings=timings, candidate_plans=[fb], chosen_index=0,
            n_samples=len(samples), n_candidates=0, fallback=True,
        )

    t0 = time.perf_counter()

    def cache_key(c: HomotopyCandidate) -> tuple:
        return c.mode_vector.modes if c.mode_vector is not None else ()

    if config.parallel and len(candidates) > 1:
        # isolated cache copies per worker; merge afterwards
        locals_ = [
            dict(warm_cache.get(cache_key(c), {})) if warm_cache is not None else None
            for c in candidates
        ]
        with ThreadPoolExecutor(max_workers=min(4, len(candidates))) as pool:
            plans = list(
                pool.map(
                    lambda pair: sqp_solve(
                        pair[0], scene, reference, ec_ids, frozen_ids, config,
                        prediction, dual_cache=pair[1],
                    ),
                    zip(candidates, locals_),
                )
            )
        if warm_cache is not None:
            for c, d in zip(candidates, locals_):
                warm_cache[cache_key(c)] = d
    else:
        plans = []
        for c in candidates:
            cache = (
                warm_cache.setdefault(cache_key(c), {}) if warm_cache is not None else None
            )
            plans.append(
                sqp_solve(
                    c, scene, reference, ec_ids, frozen_ids, config, prediction,
                    dual_cache=cache,
                )
            )
    loop_wall = time.perf_counter() - t0
    timings["build"] = sum(p.build_time for p in plans)
    timings["solve"] = sum(p.solve_time for p in plans)
    if timings["build"] + timings["solve"] > loop_wall:
        # concurrent candidates overlap; rescale so components sum to the wall time
        scale = loop_wall / (timings["build"] + timings["solve"])
        timings["build"] *= scale
        timings["solve"] *= scale

    feasible = [
        i
        for i, p in enumerate(plans)
        if p.slack_usage["collision"] <= config.slack_threshold_collision
        and p.slack_usage["lane"] <= config.slack_threshold_lane
    ]
    if feasible:
        chosen = min(
            feasible, key=lambda i: (plans[i].total_cost, -plans[i].reward)
        )
        best = plans[chosen]
    else:
        chosen = min(
            range(len(plans)),
            key=lambda i: max(
                plans[i].slack_usage["collision"] / config.slack_threshold_collision,
                plans[i].slack_usage["lane"] / config.slack_threshold_lane,
            ),
        )
        best = replace(plans[chosen], degraded=True)

    timings["total"] = time.perf_counter() - t_start
    timings["other"] = timings["total"] - sum(
        timings[k] for k in ("predict", "sample", "select", "build", "solve")
    )
    return best, PlanDiagnostics(
        timings=timings,
        candidate_plans=plans,
        chosen_index=chosen,
        n_samples=len(samples),
        n_candidates=len(candidates),
    )
