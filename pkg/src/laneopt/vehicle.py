"""Vehicle models: kinematic bicycle dynamics with analytic Jacobians, and the
double-integrator proxy used by the decision stage, with conversions between
the two state representations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class ModelDomainError(ValueError):
    """Raised when (v, delta) leaves the validity region of the bicycle model."""


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters and input limits shared by both planner stages."""

    wheelbase: float = 2.7  # [m]
    length: float = 4.5  # [m]
    width: float = 2.0  # [m] footprint width, used by the collision metric
    a_min: float = -6.0  # [m/s^2]
    a_max: float = 3.0  # [m/s^2]
    delta_min: float = -0.6  # [rad]
    delta_max: float = 0.6  # [rad]
    ax_min: float = -6.0  # [m/s^2] proxy-model longitudinal box
    ax_max: float = 3.0
    ay_min: float = -2.5  # [m/s^2] proxy-model lateral box
    ay_max: float = 2.5
    rho: float = 3.0  # forward-motion ratio vx >= rho*|vy|
    axis_speed_gain: float = 0.2  # [s] major-axis inflation per m/s of speed

    def __post_init__(self) -> None:
        assert self.wheelbase > 0.0, "wheelbase must be positive"
        assert self.length > 0.0, "length must be positive"
        assert self.width > 0.0, "width must be positive"
        for lo, hi, name in (
            (self.a_min, self.a_max, "a"),
            (self.delta_min, self.delta_max, "delta"),
            (self.ax_min, self.ax_max, "ax"),
            (self.ay_min, self.ay_max, "ay"),
        ):
            assert lo < hi, f"{name} box is empty"
        assert self.rho > 0.0, "rho must be positive"


@dataclass(frozen=True)
class EgoState:
    """Bicycle-model state: position, heading in (-pi, pi], speed."""

    px: float
    py: float
    theta: float
    v: float

    def to_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta, self.v], dtype=float)

    @staticmethod
    def from_array(x: np.ndarray) -> "EgoState":
        return EgoState(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class ControlInput:
    """Bicycle-model input: steering angle and longitudinal acceleration."""

    delta: float
    a: float

    def to_array(self) -> np.ndarray:
        return np.array([self.delta, self.a], dtype=float)

    @staticmethod
    def from_array(u: np.ndarray) -> "ControlInput":
        return ControlInput(float(u[0]), float(u[1]))


def wrap_angle(theta: float) -> float:
    """Normalize an angle into (-pi, pi]; exact for angles already in range."""
    if -math.pi < theta <= math.pi:
        return theta
    t = math.fmod(theta + math.pi, TWO_PI)
    if t <= 0.0:
        t += TWO_PI
    return t - math.pi


def f_r(v: float, delta: float, ts: float, wheelbase: float) -> float:
    """Arc advance of the rear-referenced bicycle over one step.

    h + ts*v*cos(delta) - sqrt(h^2 - (ts*v*sin(delta))^2); the radicand must be
    nonnegative, which bounds |ts*v*sin(delta)| by the wheelbase.
    """
    s = ts * v * math.sin(delta)
    rad = wheelbase * wheelbase - s * s
    if rad < 0.0:
        raise ModelDomainError(
            f"|ts*v*sin(delta)|={abs(s):.6g} exceeds wheelbase {wheelbase:.6g}"
        )
    return wheelbase + ts * v * math.cos(delta) - math.sqrt(rad)


def bicycle_step_array(x: np.ndarray, u: np.ndarray, p: VehicleParams, ts: float) -> np.ndarray:
    """One discrete bicycle step on raw arrays (kernel shared by all callers)."""
    px, py, theta, v = float(x[0]), float(x[1]), float(x[2]), float(x[3])
    delta, a = float(u[0]), float(u[1])
    adv = f_r(v, delta, ts, p.wheelbase)
    w = ts * v * math.sin(delta) / p.wheelbase
    if abs(w) > 1.0:
        raise ModelDomainError(f"arcsin argument {w:.6g} outside [-1, 1]")
    return np.array(
        [
            px + adv * math.cos(theta),
            py + adv * math.sin(theta),
            wrap_angle(theta + math.asin(w)),
            v + ts * a,
        ]
    )


def bicycle_step(x: EgoState, u: ControlInput, p: VehicleParams, ts: float) -> EgoState:
    """Advance the nonlinear bicycle model by one step of length ts."""
    return EgoState.from_array(bicycle_step_array(x.to_array(), u.to_array(), p, ts))


def linearize_bicycle(
    x: np.ndarray | EgoState, u: np.ndarray | ControlInput, p: VehicleParams, ts: float
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (A, B) of bicycle_step at (x, u).

    A is 4x4 (d next-state / d state), B is 4x2 (d next-state / d input).
    """
    if isinstance(x, EgoState):
        x = x.to_array()
    if isinstance(u, ControlInput):
        u = u.to_array()
    theta, v = float(x[2]), float(x[3])
    delta = float(u[0])
    h = p.wheelbase
    sd, cd = math.sin(delta), math.cos(delta)
    st, ct = math.sin(theta), math.cos(theta)
    s = ts * v * sd
    rad = h * h - s * s
    if rad <= 0.0:
        raise ModelDomainError("Jacobian requested on the domain boundary")
    root = math.sqrt(rad)
    adv = h + ts * v * cd - root
    dadv_dv = ts * cd + ts * ts * v * sd * sd / root
    dadv_dd = -ts * v * sd + ts * ts * v * v * sd * cd / root
    w = s / h
    dw = 1.0 / math.sqrt(1.0 - w * w)

    A = np.eye(4)
    A[0, 2] = -adv * st
    A[0, 3] = dadv_dv * ct
    A[1, 2] = adv * ct
    A[1, 3] = dadv_dv * st
    A[2, 3] = (ts * sd / h) * dw

    B = np.zeros((4, 2))
    B[0, 0] = dadv_dd * ct
    B[1, 0] = dadv_dd * st
    B[2, 0] = (ts * v * cd / h) * dw
    B[3, 1] = ts
    return A, B


def discrete_proxy_matrices(dt: float, zoh_positions: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Discrete (A_d, B_d) of the double integrator.

    zoh_positions=True is the exact zero-order hold (positions receive the
    0.5*dt^2 input coupling). False reproduces the decoupled variant that drops
    that coupling and the lateral-position carryover, kept for A/B comparison.
    """
    if zoh_positions:
        A = np.array(
            [
                [1.0, 0.0, dt, 0.0],
                [0.0, 1.0, 0.0, dt],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
        B = np.array(
            [
                [0.5 * dt * dt, 0.0],
                [0.0, 0.5 * dt * dt],
                [dt, 0.0],
                [0.0, dt],
            ]
        )
    else:
        A = np.array(
            [
                [1.0, 0.0, dt, 0.0],
                [0.0, 0.0, 0.0, dt],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
        B = np.array(
            [
                [0.0, 0.0],
                [0.0, 0.0],
                [1.0, 0.0],
                [0.0, 1.0],
            ]
        )
    return A, B


def double_integrator_step(xbar: np.ndarray, ubar: np.ndarray, dt: float,
                           zoh_positions: bool = True) -> np.ndarray:
    """One step of the proxy model (px, py, vx, vy) under inputs (ax, ay)."""
    A, B = discrete_proxy_matrices(dt, zoh_positions)
    return A @ np.asarray(xbar, dtype=float) + B @ np.asarray(ubar, dtype=float)


def to_linear(x: EgoState) -> np.ndarray:
    """EgoState -> proxy state (px, py, vx, vy) with vx = v cos(theta)."""
    return np.array(
        [x.px, x.py, x.v * math.cos(x.theta), x.v * math.sin(x.theta)]
    )


def from_linear(xbar: np.ndarray) -> EgoState:
    """Proxy state -> EgoState; heading defaults to 0 at zero velocity."""
    px, py, vx, vy = (float(c) for c in xbar)
    v = math.hypot(vx, vy)
    theta = math.atan2(vy, vx) if v > 0.0 else 0.0
    return EgoState(px, py, wrap_angle(theta), v)
