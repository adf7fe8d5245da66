"""Angular distance between discretized trajectories, mode classification into
clockwise / stationary / counter-clockwise bands, mode vectors over multiple
obstacles, and an executable continuous-deformation construction between
trajectories sharing a mode vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angles


class CoincidentPointsError(ValueError):
    """Ego and obstacle positions (near-)coincide at a shared time index."""

    def __init__(self, message: str, obstacle_id: str = ""):
        super().__init__(message)
        self.obstacle_id = obstacle_id


class ModeRegionViolationError(RuntimeError):
    """A deformed trajectory left the mode-consistent region."""


@dataclass(frozen=True)
class DiscreteTrajectory:
    """Uniformly sampled planar trajectory for one agent.

    ``xy`` is (n, 2); ``headings`` is (n,); ``speeds`` is optional (n,).
    """

    xy: np.ndarray
    headings: np.ndarray
    dt: float
    agent_id: str = ""
    speeds: np.ndarray | None = None

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float)
        headings = np.asarray(self.headings, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 planar samples")
        if headings.shape != (xy.shape[0],):
            raise ValueError("headings must have one entry per sample")
        if not (np.all(np.isfinite(xy)) and np.all(np.isfinite(headings))):
            raise ValueError("trajectory coordinates must be finite")
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ValueError("dt must be positive")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "headings", headings)
        if self.speeds is not None:
            speeds = np.asarray(self.speeds, dtype=float)
            if speeds.shape != (xy.shape[0],):
                raise ValueError("speeds must have one entry per sample")
            object.__setattr__(self, "speeds", speeds)

    @classmethod
    def from_xy(cls, xy, dt: float, agent_id: str = "", speeds=None) -> "DiscreteTrajectory":
        """Build a trajectory from positions, deriving headings from segments."""
        xy = np.asarray(xy, dtype=float)
        seg = np.diff(xy, axis=0)
        hd = np.zeros(len(xy))
        nonzero = np.linalg.norm(seg, axis=1) > 1e-12
        ang = np.arctan2(seg[:, 1], seg[:, 0])
        last = 0.0
        for i in range(len(seg)):
            if nonzero[i]:
                last = ang[i]
            hd[i] = last
        hd[-1] = last
        # backfill leading stationary samples with the first moving heading
        first_moving = np.argmax(nonzero) if nonzero.any() else None
        if first_moving is not None:
            hd[: first_moving + 1] = ang[first_moving]
        return cls(xy=xy, headings=hd, dt=dt, agent_id=agent_id, speeds=speeds)

    def __len__(self) -> int:
        return self.xy.shape[0]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def resampled(self, n: int) -> "DiscreteTrajectory":
        """Linear-interpolation resampling to ``n`` samples over the same duration."""
        if n < 2:
            raise ValueError("need at least 2 samples")
        t_old = np.arange(len(self)) * self.dt
        t_new = np.linspace(0.0, self.duration, n)
        xy = np.column_stack(
            [np.interp(t_new, t_old, self.xy[:, 0]), np.interp(t_new, t_old, self.xy[:, 1])]
        )
        speeds = None
        if self.speeds is not None:
            speeds = np.interp(t_new, t_old, self.speeds)
        return DiscreteTrajectory.from_xy(
            xy, dt=self.duration / (n - 1), agent_id=self.agent_id, speeds=speeds
        )


@dataclass(frozen=True)
class ModeVector:
    """One integer mode per obstacle, ordered as the obstacles were given."""

    modes: tuple[int, ...]
    obstacle_ids: tuple[str, ...]

    def __post_init__(self):
        if len(self.modes) != len(self.obstacle_ids):
            raise ValueError("modes and obstacle ids must align")

    def __len__(self) -> int:
        return len(self.modes)

    def mode_for(self, obstacle_id: str) -> int:
        return self.modes[self.obstacle_ids.index(obstacle_id)]


@dataclass(frozen=True)
class HomotopyConfig:
    """Mode threshold; the deformation argument needs 0 < theta_hat <= pi/2."""

    theta_hat: float = math.pi / 3.0

    def __post_init__(self):
        if not (0.0 < self.theta_hat <= math.pi / 2.0):
            raise ValueError("theta_hat must lie in (0, pi/2]")


MIN_SEPARATION = 1e-9


def angular_distance(ego: DiscreteTrajectory, obstacle: DiscreteTrajectory) -> float:
    """Accumulated bearing change of (ego - obstacle) along the trajectories.

    Per-step increments are four-quadrant bearing differences wrapped to
    (-pi, pi]; the sum is the winding-sensitive angular distance.
    """
    if len(ego) != len(obstacle):
        raise ValueError("trajectories must have equal length")
    if abs(ego.dt - obstacle.dt) > 1e-12:
        raise ValueError("trajectories must share dt")
    rel = ego.xy - obstacle.xy
    norms = np.linalg.norm(rel, axis=1)
    if np.any(norms < MIN_SEPARATION):
        raise CoincidentPointsError(
            "ego and obstacle positions coincide", obstacle_id=obstacle.agent_id
        )
    bearings = np.arctan2(rel[:, 1], rel[:, 0])
    increments = wrap_angles(np.diff(bearings))
    return float(increments.sum())


def mode_of(delta_theta: float, config: HomotopyConfig) -> int:
    """Integer mode of an angular distance: 0 is stationary, +k counter-clockwise
    bands, -k clockwise bands, with contiguous half-open intervals of width pi."""
    if not math.isfinite(delta_theta):
        raise ValueError("angular distance must be finite")
    th = config.theta_hat
    if -th <= delta_theta < th:
        return 0
    if delta_theta >= th:
        return int(math.floor((delta_theta - th) / math.pi)) + 1
    return -int(math.ceil((-delta_theta - th) / math.pi))


def mode_vector(
    ego: DiscreteTrajectory,
    obstacles,
    config: HomotopyConfig,
) -> ModeVector:
    """Mode of the ego trajectory with respect to each obstacle, in input order."""
    modes = []
    ids = []
    for i, obs in enumerate(obstacles):
        obs_id = obs.agent_id or str(i)
        try:
            d = angular_distance(ego, obs)
        except CoincidentPointsError as err:
            raise CoincidentPointsError(str(err), obstacle_id=obs_id) from None
        modes.append(mode_of(d, config))
        ids.append(obs_id)
    return ModeVector(modes=tuple(modes), obstacle_ids=tuple(ids))


def _path_point(traj: DiscreteTrajectory, end_b: np.ndarray, tau: float) -> np.ndarray:
    """Point at parameter tau in [0, 1] of the trajectory-then-endpoint-line path."""
    if tau <= 0.5:
        # traverse the trajectory at double rate
        u = 2.0 * tau * (len(traj) - 1)
        i = min(int(math.floor(u)), len(traj) - 2)
        f = u - i
        return traj.xy[i] + f * (traj.xy[i + 1] - traj.xy[i])
    # straight line from the trajectory end to the other end point
    f = 2.0 * tau - 1.0
    return traj.xy[-1] + f * (end_b - traj.xy[-1])


def build_deformation(
    traj_a: DiscreteTrajectory,
    traj_b: DiscreteTrajectory,
    lam: float,
    obstacles,
    config: HomotopyConfig,
) -> DiscreteTrajectory:
    """Intermediate trajectory of the deformation carrying traj_a's end point
    toward traj_b's along the straight end-point segment.

    ``lam`` = 0 returns a time-rescaled traj_a; ``lam`` = 1 reaches traj_b's end
    point. The output is resampled to twice the input length. Raises
    ModeRegionViolationError if the result's mode vector differs from traj_a's
    (the end points were not far enough inside the mode-consistent region).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if len(traj_a) != len(traj_b) or abs(traj_a.dt - traj_b.dt) > 1e-12:
        raise ValueError("trajectories must share sampling")
    if not np.allclose(traj_a.xy[0], traj_b.xy[0], atol=1e-9):
        raise ValueError("trajectories must share the start point")

    n_out = 2 * len(traj_a)
    obstacles = list(obstacles)
    obstacles_resampled = [obs.resampled(n_out) for obs in obstacles]
    reference_modes = mode_vector(
        traj_a.resampled(n_out), obstacles_resampled, config
    )

    end_b = traj_b.xy[-1]
    taus = np.linspace(0.0, 1.0, n_out) * (1.0 + lam) / 2.0
    xy = np.array([_path_point(traj_a, end_b, tau) for tau in taus])
    out = DiscreteTrajectory.from_xy(
        xy, dt=traj_a.duration / (n_out - 1), agent_id=traj_a.agent_id
    )

    out_modes = mode_vector(out, obstacles_resampled, config)
    if out_modes.modes != reference_modes.modes:
        raise ModeRegionViolationError(
            f"deformation at lambda={lam} changed the mode vector "
            f"{reference_modes.modes} -> {out_modes.modes}"
        )
    return out


def mode_interval(mode: int, config: HomotopyConfig) -> tuple[float, float]:
    """Half-open angular-distance interval [lo, hi) that maps to ``mode``."""
    th = config.theta_hat
    if mode == 0:
        return -th, th
    if mode > 0:
        return th + (mode - 1) * math.pi, th + mode * math.pi
    k = -mode
    return -(th + k * math.pi), -(th + (k - 1) * math.pi)
