"""Interactive joint trajectory planning toolkit: free-end homotopy candidate
selection, joint ego+agent SQP-MPC with collision and lane constraints,
pluggable kinematic predictors, and a deterministic closed-loop simulator.
"""

from .dynamics import (
    DynamicLimits,
    PedestrianInput,
    PedestrianState,
    VehicleInput,
    VehicleState,
)
from .geometry import Disc, OrientedBox, Polyline, Pose2
from .homotopy import DiscreteTrajectory, HomotopyConfig, ModeVector
from .planner import JointPlan, PlannerConfig, plan
from .predictor import (
    Agent,
    AgentKind,
    AgentPartition,
    JointPrediction,
    PredictorKind,
    SceneSnapshot,
)
from .qp import QpSolution, QuadProgram, kkt_residual, solve
from .routing import Lane, LaneGraph, Reference, build_reference, plan_route
from .sampler import HomotopyCandidate, SampleLattice, ScoredSample
from .sim import Metrics, Scenario, SimLog, compute_metrics, run_closed_loop

__all__ = [
    "Agent",
    "AgentKind",
    "AgentPartition",
    "Disc",
    "DiscreteTrajectory",
    "DynamicLimits",
    "HomotopyCandidate",
    "HomotopyConfig",
    "JointPlan",
    "JointPrediction",
    "Lane",
    "LaneGraph",
    "Metrics",
    "ModeVector",
    "OrientedBox",
    "PedestrianInput",
    "PedestrianState",
    "PlannerConfig",
    "Polyline",
    "Pose2",
    "PredictorKind",
    "QpSolution",
    "QuadProgram",
    "Reference",
    "SampleLattice",
    "Scenario",
    "SceneSnapshot",
    "ScoredSample",
    "SimLog",
    "VehicleInput",
    "VehicleState",
    "build_reference",
    "compute_metrics",
    "kkt_residual",
    "plan",
    "plan_route",
    "run_closed_loop",
    "solve",
]

__version__ = "0.1.0"
