"""Planner configuration dataclasses shared by the two stages.

All numeric defaults are repo-chosen operating points (tuned on the shipped
scenarios), not published ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class DecisionWeights:
    """Stage-one objective weights and big-M constants."""

    track_x: float = 0.0  # longitudinal tracking; 0 on straight roads
    track_y: float = 0.35  # lateral tracking toward the target lane center
    velocity: float = 0.08  # quadratic pull toward the target-lane reference speed
    accel_x: float = 0.10  # proxy-input comfort, longitudinal
    accel_y: float = 0.30  # proxy-input comfort, lateral
    speed_lv: float = 0.20  # gated (v_lv - vx)^2 when the lead is slower
    dist_lv: float = 900.0  # reciprocal-distance penalty toward leads
    speed_nv: float = 0.20  # gated (v_nv - vx)^2 when a rear vehicle is faster
    dist_nv: float = 60.0  # reciprocal-distance penalty toward rear vehicles
    epsilon: float = 1.0  # [m] keeps reciprocal distances finite
    epsilon_strict: float = 1e-3  # [m/s] strict-inequality margin in the sign splits
    big_m: float | None = None  # None = auto-sized from the velocity box

    def __post_init__(self) -> None:
        for name in (
            "track_x", "track_y", "velocity", "accel_x", "accel_y",
            "speed_lv", "dist_lv", "speed_nv", "dist_nv",
        ):
            assert getattr(self, name) >= 0.0, f"{name} must be nonnegative"
        assert self.epsilon > 0.0, "epsilon must be positive"
        assert self.epsilon_strict > 0.0, "epsilon_strict must be positive"
        assert self.big_m is None or self.big_m > 0.0, "big_m must be positive"


@dataclass(frozen=True)
class StageOneOptions:
    """Structural switches for the decision-stage model build."""

    refine_soft_costs: bool = False  # re-freeze soft costs once along the first solve
    dwell_steps: int = 1  # minimum consecutive steps a change decision must hold
    zoh_positions: bool = True  # exact ZOH proxy discretization (False: decoupled variant)
    # optionally convexifies relaxations via delta*(v^2 - v) per binary, which
    # vanishes at integral points and only loosens fractional bounds; the
    # discount at fractional values weakens branching guidance, so it stays off
    binary_curvature: float = 0.0

    def __post_init__(self) -> None:
        assert self.dwell_steps >= 1, "dwell_steps must be >= 1"
        assert self.binary_curvature >= 0.0, "binary_curvature must be nonnegative"


@dataclass(frozen=True)
class TrajWeights:
    """Stage-two tracking and input weights."""

    q_px: float = 0.0  # longitudinal position tracking (0 on straight roads)
    q_py: float = 1.5
    q_vx: float = 0.6
    r_steer: float = 12.0
    r_accel: float = 2.0

    def __post_init__(self) -> None:
        for name in ("q_px", "q_py", "q_vx"):
            assert getattr(self, name) >= 0.0, f"{name} must be nonnegative"
        assert self.r_steer > 0.0 and self.r_accel > 0.0, "input weights must be positive"


@dataclass(frozen=True)
class AdmmOptions:
    """Outer-loop settings of the constrained trajectory solver."""

    penalty: float = 1.0
    tol_primal: float = 1e-3
    tol_dual: float = 1e-3
    max_outer: int = 60
    max_ilqr_iter: int = 40
    adapt_penalty: bool = False  # residual balancing, factor 2, bounds [1e-2, 1e2]

    def __post_init__(self) -> None:
        assert self.penalty > 0.0
        assert self.tol_primal > 0.0 and self.tol_dual > 0.0
        assert self.max_outer >= 1 and self.max_ilqr_iter >= 1


@dataclass(frozen=True)
class SolverParams:
    """Branch-and-bound and QP-relaxation settings."""

    gap_tol: float = 1e-4  # relative optimality gap accepted by the search
    feas_tol: float = 1e-6
    integrality_tol: float = 1e-5
    node_limit: int = 10000
    qp_iter_limit: int = 4000
    qp_rho: float = 1.0  # operator-splitting penalty
    qp_alpha: float = 1.6  # over-relaxation factor
    verbose: bool = False

    def __post_init__(self) -> None:
        for name in ("gap_tol", "feas_tol", "integrality_tol", "qp_rho"):
            assert getattr(self, name) > 0.0, f"{name} must be positive"
        assert self.node_limit >= 1 and self.qp_iter_limit >= 1
        assert 0.0 < self.qp_alpha < 2.0, "over-relaxation factor must lie in (0, 2)"
