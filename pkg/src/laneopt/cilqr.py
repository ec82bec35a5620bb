"""Trajectory stage: iLQR on the bicycle model inside an ADMM loop that
enforces input boxes and elliptical collision-avoidance constraints by
projection, with scaled dual updates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .miqp import ReferenceProfile
from .params import AdmmOptions, TrajWeights
from .vehicle import (
    ControlInput,
    EgoState,
    ModelDomainError,
    VehicleParams,
    bicycle_step_array,
    linearize_bicycle,
)

log = logging.getLogger("laneopt.cilqr")

CONVERGED = "converged"
OUTER_LIMIT = "iteration-limit"


class CilqrError(RuntimeError):
    """Backward pass failed at maximum regularization."""


@dataclass(frozen=True)
class ObstacleEllipse:
    """Keep-out ellipse for one surrounding vehicle at one step."""

    cx: float
    cy: float
    heading: float
    a: float  # semi-major axis [m]
    b: float  # semi-minor axis [m]

    def __post_init__(self) -> None:
        assert self.a >= self.b > 0.0, "expects a >= b > 0"


@dataclass
class AdmmState:
    """Copies, scaled duals and residual history of one solve."""

    z_inputs: np.ndarray  # (N, 2) input copies
    d_inputs: np.ndarray  # scaled duals
    z_pos: dict[tuple[int, int], np.ndarray]  # (step, obstacle) -> 2-vector
    d_pos: dict[tuple[int, int], np.ndarray]
    penalty: float
    primal_history: list[float] = field(default_factory=list)
    dual_history: list[float] = field(default_factory=list)
    descent_log: list[list[float]] = field(default_factory=list)


@dataclass
class TrajectoryPlan:
    """Stage-two output; states satisfy the bicycle recursion exactly."""

    states: np.ndarray  # (N+1, 4)
    inputs: np.ndarray  # (N, 2)
    step_costs: np.ndarray  # (N,)
    total_cost: float
    status: str
    outer_iterations: int
    max_margin_violation: float
    admm: AdmmState

    @property
    def ego_states(self) -> list[EgoState]:
        return [EgoState.from_array(x) for x in self.states]


def stage_cost(x: np.ndarray, u: np.ndarray, ref: np.ndarray, w: TrajWeights) -> float:
    """Tracking plus input effort at one step; ref = (px_ref, py_ref, vx_ref)."""
    vx = x[3] * math.cos(x[2])
    c = (
        w.q_px * (x[0] - ref[0]) ** 2
        + w.q_py * (x[1] - ref[1]) ** 2
        + w.q_vx * (vx - ref[2]) ** 2
    )
    if u is not None:
        c += w.r_steer * u[0] ** 2 + w.r_accel * u[1] ** 2
    return float(c)


def quadratize_cost(
    x: np.ndarray, u: np.ndarray, ref: np.ndarray, w: TrajWeights
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Second-order model of stage_cost: (lx, lu, lxx, luu); lux is zero."""
    theta, v = float(x[2]), float(x[3])
    st, ct = math.sin(theta), math.cos(theta)
    dv = v * ct - ref[2]
    lx = np.array(
        [
            2.0 * w.q_px * (x[0] - ref[0]),
            2.0 * w.q_py * (x[1] - ref[1]),
            2.0 * w.q_vx * dv * (-v * st),
            2.0 * w.q_vx * dv * ct,
        ]
    )
    lxx = np.zeros((4, 4))
    lxx[0, 0] = 2.0 * w.q_px
    lxx[1, 1] = 2.0 * w.q_py
    lxx[2, 2] = 2.0 * w.q_vx * (v * v * st * st - dv * v * ct)
    lxx[2, 3] = lxx[3, 2] = -2.0 * w.q_vx * st * (v * ct + dv)
    lxx[3, 3] = 2.0 * w.q_vx * ct * ct
    if u is None:
        return lx, np.zeros(2), lxx, np.zeros((2, 2))
    lu = np.array([2.0 * w.r_steer * u[0], 2.0 * w.r_accel * u[1]])
    luu = np.diag([2.0 * w.r_steer, 2.0 * w.r_accel])
    return lx, lu, lxx, luu


def ellipse_margin(x, e: ObstacleEllipse) -> float:
    """Rotated-frame quadratic form minus one: negative strictly inside."""
    px, py = (x.px, x.py) if isinstance(x, EgoState) else (float(x[0]), float(x[1]))
    dx, dy = px - e.cx, py - e.cy
    ca, sa = math.cos(e.heading), math.sin(e.heading)
    lon = dx * ca + dy * sa
    lat = dx * sa - dy * ca
    return (lon / e.a) ** 2 + (lat / e.b) ** 2 - 1.0


def project_inputs(u: ControlInput | np.ndarray, p: VehicleParams):
    """Componentwise clamp to the steering and acceleration boxes."""
    if isinstance(u, ControlInput):
        return ControlInput(
            min(max(u.delta, p.delta_min), p.delta_max),
            min(max(u.a, p.a_min), p.a_max),
        )
    out = np.array(u, dtype=float)
    out[..., 0] = np.clip(out[..., 0], p.delta_min, p.delta_max)
    out[..., 1] = np.clip(out[..., 1], p.a_min, p.a_max)
    return out


def project_collision(point, e: ObstacleEllipse) -> np.ndarray:
    """Identity outside the ellipse; nearest boundary point for the inside.

    The interior case solves the projection's scalar Lagrange condition by
    bisection on its single root in (-b^2, 0]; the center maps to the
    boundary along the major axis by convention.
    """
    p = np.array([float(point[0]), float(point[1])])
    if ellipse_margin(p, e) >= 0.0:
        return p
    ca, sa = math.cos(e.heading), math.sin(e.heading)
    dx, dy = p[0] - e.cx, p[1] - e.cy
    lon = dx * ca + dy * sa
    lat = dx * sa - dy * ca
    a, b = e.a, e.b

    if lon == 0.0 and lat == 0.0:
        q = np.array([a, 0.0])
    elif abs(a - b) < 1e-12:
        r = math.hypot(lon, lat)
        q = np.array([lon, lat]) * (a / r)
    elif abs(lat) < 1e-14:
        split = (a * a - b * b) / a
        if abs(lon) < split:
            qx = a * a * lon / (a * a - b * b)
            q = np.array([qx, b * math.sqrt(max(0.0, 1.0 - (qx / a) ** 2))])
        else:
            q = np.array([math.copysign(a, lon), 0.0])
    else:
        g = lambda t: (a * lon / (a * a + t)) ** 2 + (b * lat / (b * b + t)) ** 2 - 1.0
        lo, hi = -b * b, 0.0
        # g -> +inf at -b^2 and is below zero at 0 for interior points
        lo = lo + 1e-15 * max(1.0, b * b)
        while g(lo) < 0.0:  # guard fully-degenerate roundoff
            lo *= 0.5
            if abs(lo) < 1e-300:
                break
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if g(mid) > 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-10 * max(1.0, b * b):
                break
        t = 0.5 * (lo + hi)
        q = np.array([a * a * lon / (a * a + t), b * b * lat / (b * b + t)])
        # snap exactly onto the boundary along the ray from the frame origin
        norm = math.hypot(q[0] / a, q[1] / b)
        q = q / norm
    return np.array(
        [e.cx + q[0] * ca + q[1] * sa, e.cy + q[0] * sa - q[1] * ca]
    )


def _rollout(x0: np.ndarray, inputs: np.ndarray, p: VehicleParams, ts: float) -> np.ndarray:
    N = len(inputs)
    xs = np.empty((N + 1, 4))
    xs[0] = x0
    for i in range(N):
        xs[i + 1] = bicycle_step_array(xs[i], inputs[i], p, ts)
    return xs


def _penalized_cost(
    xs, us, refs, w: TrajWeights, rho: float, state: AdmmState
) -> float:
    N = len(us)
    total = 0.0
    for i in range(N):
        ref = np.array([refs.px_ref[i], refs.py_ref[i], refs.vx_ref[i]])
        total += stage_cost(xs[i], us[i], ref, w)
    ref = np.array([refs.px_ref[N], refs.py_ref[N], refs.vx_ref[N]])
    total += stage_cost(xs[N], None, ref, w)
    diff = us - (state.z_inputs - state.d_inputs)
    total += 0.5 * rho * float(np.sum(diff * diff))
    for (i, _o), z in state.z_pos.items():
        d = state.d_pos[(i, _o)]
        dd = xs[i, :2] - (z - d)
        total += 0.5 * rho * float(dd @ dd)
    return total


def _ilqr_xupdate(
    x0, us, refs, w, p, ts, rho, state: AdmmState, max_iter: int, logbook: list[float]
):
    """Unconstrained iLQR on the penalized objective; returns (xs, us)."""
    N = len(us)
    xs = _rollout(x0, us, p, ts)
    cost = _penalized_cost(xs, us, refs, w, rho, state)
    logbook.append(cost)
    pos_targets: dict[int, list[np.ndarray]] = {}
    for (i, o), z in state.z_pos.items():
        pos_targets.setdefault(i, []).append(z - state.d_pos[(i, o)])

    for _ in range(max_iter):
        # backward pass with Levenberg regularization
        k_ff = np.empty((N, 2))
        K_fb = np.empty((N, 2, 4))
        lam = 1e-8
        while True:
            ok = True
            ref = np.array([refs.px_ref[N], refs.py_ref[N], refs.vx_ref[N]])
            Vx, _, Vxx, _ = quadratize_cost(xs[N], None, ref, w)
            for tgt in pos_targets.get(N, ()):
                Vx[:2] += rho * (xs[N, :2] - tgt)
                Vxx[0, 0] += rho
                Vxx[1, 1] += rho
            for i in range(N - 1, -1, -1):
                ref = np.array([refs.px_ref[i], refs.py_ref[i], refs.vx_ref[i]])
                lx, lu, lxx, luu = quadratize_cost(xs[i], us[i], ref, w)
                for tgt in pos_targets.get(i, ()):
                    lx[:2] += rho * (xs[i, :2] - tgt)
                    lxx[0, 0] += rho
                    lxx[1, 1] += rho
                lu += rho * (us[i] - (state.z_inputs[i] - state.d_inputs[i]))
                luu = luu + rho * np.eye(2)
                try:
                    A, B = linearize_bicycle(xs[i], us[i], p, ts)
                except ModelDomainError:
                    ok = False
                    break
                Qx = lx + A.T @ Vx
                Qu = lu + B.T @ Vx
                Qxx = lxx + A.T @ Vxx @ A
                Quu = luu + B.T @ Vxx @ B + lam * np.eye(2)
                Qux = B.T @ Vxx @ A
                det = Quu[0, 0] * Quu[1, 1] - Quu[0, 1] * Quu[1, 0]
                if not (Quu[0, 0] > 0.0 and det > 0.0):
                    ok = False
                    break
                inv = np.array(
                    [[Quu[1, 1], -Quu[0, 1]], [-Quu[1, 0], Quu[0, 0]]]
                ) / det
                k_ff[i] = -inv @ Qu
                K_fb[i] = -inv @ Qux
                Vx = Qx + K_fb[i].T @ Quu @ k_ff[i] + K_fb[i].T @ Qu + Qux.T @ k_ff[i]
                Vxx = Qxx + K_fb[i].T @ Quu @ K_fb[i] + K_fb[i].T @ Qux + Qux.T @ K_fb[i]
                Vxx = 0.5 * (Vxx + Vxx.T)
            if ok:
                break
            lam = lam * 10.0 if lam > 0 else 1e-8
            if lam > 1e10:
                raise CilqrError("backward pass failed at maximum regularization")

        # forward pass: backtracking, accept only strict cost decrease
        accepted = False
        step = 1.0
        for _ls in range(11):
            try:
                xs_new = np.empty_like(xs)
                us_new = np.empty_like(us)
                xs_new[0] = x0
                for i in range(N):
                    du = step * k_ff[i] + K_fb[i] @ (xs_new[i] - xs[i])
                    us_new[i] = us[i] + du
                    xs_new[i + 1] = bicycle_step_array(xs_new[i], us_new[i], p, ts)
                if not np.all(np.isfinite(xs_new)):
                    raise ModelDomainError("nonfinite rollout")
                new_cost = _penalized_cost(xs_new, us_new, refs, w, rho, state)
            except ModelDomainError:
                step *= 0.5
                continue
            if new_cost < cost:
                xs, us, cost = xs_new, us_new, new_cost
                logbook.append(cost)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if len(logbook) >= 2 and abs(logbook[-2] - logbook[-1]) <= 1e-8 * max(1.0, abs(cost)):
            break
    return xs, us


def admm_cilqr_solve(
    x0: EgoState,
    refs: ReferenceProfile,
    obstacles: list[list[ObstacleEllipse]],
    w: TrajWeights,
    p: VehicleParams,
    opts: AdmmOptions,
    ts: float,
    warm_inputs: np.ndarray | None = None,
) -> TrajectoryPlan:
    """Constrained trajectory solve by operator splitting.

    Alternates an unconstrained iLQR x-update on the penalized objective, a
    projection z-update (input box, ellipse exteriors on positions), and a
    scaled dual ascent; the returned plan is re-rolled through the bicycle
    model so dynamics hold exactly and inputs are re-projected into the box.
    """
    N = len(refs.t) - 1
    if len(obstacles) != N + 1:
        raise ValueError(f"need obstacle lists for each of {N + 1} steps")
    x0_arr = x0.to_array()
    us = np.zeros((N, 2)) if warm_inputs is None else np.array(warm_inputs, dtype=float)

    state = AdmmState(
        z_inputs=project_inputs(us.copy(), p),
        d_inputs=np.zeros((N, 2)),
        z_pos={},
        d_pos={},
        penalty=opts.penalty,
    )
    xs = _rollout(x0_arr, us, p, ts)

    def refresh_copies(xs_now: np.ndarray) -> None:
        """Copies exist only near or inside an ellipse (or with a live dual);
        far pairs would otherwise anchor the x-update to stale positions."""
        for i in range(1, N + 1):
            for o, e in enumerate(obstacles[i]):
                key = (i, o)
                near = ellipse_margin(xs_now[i], e) < 0.5
                if key in state.z_pos:
                    if not near and float(np.max(np.abs(state.d_pos[key]))) <= 1e-12:
                        del state.z_pos[key]
                        del state.d_pos[key]
                elif near:
                    state.z_pos[key] = project_collision(xs_now[i, :2], e)
                    state.d_pos[key] = np.zeros(2)

    refresh_copies(xs)

    status = OUTER_LIMIT
    outer = 0
    for outer in range(1, opts.max_outer + 1):
        logbook: list[float] = []
        xs, us = _ilqr_xupdate(
            x0_arr, us, refs, w, p, ts, state.penalty, state, opts.max_ilqr_iter, logbook
        )
        state.descent_log.append(logbook)

        zu_prev = state.z_inputs.copy()
        state.z_inputs = project_inputs(us + state.d_inputs, p)
        r_prim = float(np.max(np.abs(us - state.z_inputs), initial=0.0))
        r_dual = float(np.max(np.abs(state.z_inputs - zu_prev), initial=0.0)) * state.penalty
        for (i, o), z_old in list(state.z_pos.items()):
            e = obstacles[i][o]
            z_new = project_collision(xs[i, :2] + state.d_pos[(i, o)], e)
            state.z_pos[(i, o)] = z_new
            r_prim = max(r_prim, float(np.max(np.abs(xs[i, :2] - z_new))))
            r_dual = max(r_dual, state.penalty * float(np.max(np.abs(z_new - z_old))))
        state.d_inputs = state.d_inputs + (us - state.z_inputs)
        for (i, o) in state.z_pos:
            state.d_pos[(i, o)] = state.d_pos[(i, o)] + (xs[i, :2] - state.z_pos[(i, o)])
        state.primal_history.append(r_prim)
        state.dual_history.append(r_dual)
        log.debug(
            "cilqr outer=%d cost=%.6g rp=%.3g rd=%.3g", outer, logbook[-1], r_prim, r_dual
        )

        if r_prim <= opts.tol_primal and r_dual <= opts.tol_dual:
            status = CONVERGED
            break
        if opts.adapt_penalty:
            new_pen = state.penalty
            if r_prim > 10.0 * r_dual:
                new_pen = min(state.penalty * 2.0, 1e2)
            elif r_dual > 10.0 * r_prim:
                new_pen = max(state.penalty / 2.0, 1e-2)
            if new_pen != state.penalty:
                # scaled duals are y/penalty: keep y continuous across updates
                ratio = state.penalty / new_pen
                state.d_inputs *= ratio
                for key in state.d_pos:
                    state.d_pos[key] = state.d_pos[key] * ratio
                state.penalty = new_pen
        refresh_copies(xs)

    us = project_inputs(us, p)
    xs = _rollout(x0_arr, us, p, ts)
    step_costs = np.array(
        [
            stage_cost(
                xs[i], us[i], np.array([refs.px_ref[i], refs.py_ref[i], refs.vx_ref[i]]), w
            )
            for i in range(N)
        ]
    )
    total = float(step_costs.sum()) + stage_cost(
        xs[N], None, np.array([refs.px_ref[N], refs.py_ref[N], refs.vx_ref[N]]), w
    )
    worst = 0.0
    for i in range(1, N + 1):
        for e in obstacles[i]:
            worst = min(worst, ellipse_margin(xs[i], e))
    return TrajectoryPlan(
        states=xs,
        inputs=us,
        step_costs=step_costs,
        total_cost=total,
        status=status,
        outer_iterations=outer,
        max_margin_violation=-worst if worst < 0 else 0.0,
        admm=state,
    )


def obstacle_ellipses(
    svs, ev_speed: float, p: VehicleParams, n_steps: int, ts: float
) -> list[list[ObstacleEllipse]]:
    """Per-trajectory-step keep-out ellipses for every surrounding vehicle.

    The major axis inflates linearly with the faster of the two vehicles so
    higher closing speeds buy longitudinal clearance.
    """
    out: list[list[ObstacleEllipse]] = []
    for i in range(n_steps + 1):
        t = i * ts
        row = []
        for sv in svs:
            s = sv.at_time(t)
            speed = math.hypot(s.vx, s.vy)
            heading = math.atan2(s.vy, s.vx) if speed > 1e-9 else 0.0
            a = 0.5 * (s.length + p.length) + p.axis_speed_gain * max(ev_speed, speed)
            b = 0.5 * (s.width + p.width)
            row.append(ObstacleEllipse(s.px, s.py, heading, max(a, b + 1e-9), b))
        out.append(row)
    return out
