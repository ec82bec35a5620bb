"""Stage-one model assembly: a mixed-integer QP over lane decisions and the
double-integrator proxy, with big-M gated interaction costs frozen along a
nominal rollout, plus extraction of the optimal decision sequence into
trajectory-stage references."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .params import DecisionWeights, StageOneOptions
from .scenario import (
    Lane,
    LaneAssignment,
    ScenarioConfig,
    ScenarioError,
    SvPrediction,
    classify_svs,
    lane_of,
    reference_velocity,
)
from .vehicle import EgoState, discrete_proxy_matrices, to_linear

INF = float("inf")


class MiqpBuildError(ValueError):
    """Model cannot be assembled (e.g. the EV starts outside the road)."""


class ExtractionError(ValueError):
    """A solver assignment is not integral or not one-hot consistent."""


@dataclass(frozen=True)
class SoftCoefficients:
    """Per-(lane, step) interaction data frozen along an EV rollout.

    kappa_* are the reciprocal-squared-distance penalties; v_* the SV speeds
    (valid where has_* is set); v_ref the per-lane reference velocity.
    """

    kappa_lv: np.ndarray  # (L, T)
    kappa_nv: np.ndarray
    v_lv: np.ndarray
    v_nv: np.ndarray
    has_lv: np.ndarray  # bool (L, T)
    has_nv: np.ndarray
    v_ref: np.ndarray  # (L, T)


def nominal_rollout(scenario: ScenarioConfig, horizon: int | None = None) -> np.ndarray:
    """Constant-velocity straight rollout in the current lane: (T, 2) of (px, py)."""
    T = scenario.horizon.T if horizon is None else horizon
    dt = scenario.horizon.dt_decision
    x0 = to_linear(scenario.ev_init)
    lane = scenario.ev_lane()
    taus = np.arange(T)
    return np.column_stack([x0[0] + taus * dt * x0[2], np.full(T, lane.center_y)])


def precompute_soft_coefficients(
    scenario: ScenarioConfig,
    predictions: list[SvPrediction],
    rollout: np.ndarray | None = None,
) -> SoftCoefficients:
    """Freeze LV/NV classification, speeds and distance penalties per (lane, step).

    The rollout (default: nominal) supplies the EV position used both to
    classify vehicles into leads/rears and to evaluate the reciprocal-distance
    penalties; distances are clamped below at zero clearance so the penalty
    saturates at w / epsilon^2.
    """
    T = scenario.horizon.T
    L = len(scenario.road)
    w = scenario.decision_weights
    veh_len = scenario.vehicle.length
    if rollout is None:
        rollout = nominal_rollout(scenario)
    kappa_lv = np.zeros((L, T))
    kappa_nv = np.zeros((L, T))
    v_lv = np.zeros((L, T))
    v_nv = np.zeros((L, T))
    has_lv = np.zeros((L, T), dtype=bool)
    has_nv = np.zeros((L, T), dtype=bool)
    v_ref = np.zeros((L, T))
    eps2 = w.epsilon**2
    for tau in range(T):
        ev = EgoState(float(rollout[tau, 0]), float(rollout[tau, 1]), 0.0, 0.0)
        assignment = classify_svs(ev, predictions, scenario.road, tau)
        for lane in scenario.road:
            k = lane.id - 1
            v_ref[k, tau] = reference_velocity(lane, assignment)
            lead = assignment.lv.get(lane.id)
            if lead is not None:
                gap = max(0.0, math.hypot(lead.px - ev.px, lead.py - ev.py) - veh_len)
                kappa_lv[k, tau] = w.dist_lv / (gap * gap + eps2)
                v_lv[k, tau] = lead.vx
                has_lv[k, tau] = True
            rear = assignment.nv.get(lane.id)
            if rear is not None:
                gap = max(0.0, math.hypot(rear.px - ev.px, rear.py - ev.py) - veh_len)
                kappa_nv[k, tau] = w.dist_nv / (gap * gap + eps2)
                v_nv[k, tau] = rear.vx
                has_nv[k, tau] = True
    return SoftCoefficients(kappa_lv, kappa_nv, v_lv, v_nv, has_lv, has_nv, v_ref)


@dataclass
class MiqpModel:
    """The assembled stage-one program.

    Objective 0.5 x'Hx + g'x + constant (H PSD, certified at build); structural
    rows rl <= A x <= ru; variable bounds lb/ub with binaries flagged. Index
    tables expose the decision structure for the search and the oracle.
    """

    scenario: ScenarioConfig
    n: int
    names: list[str]
    lb: np.ndarray
    ub: np.ndarray
    is_binary: np.ndarray
    H: sp.csc_matrix
    g: np.ndarray
    constant: float
    A: sp.csc_matrix
    rl: np.ndarray
    ru: np.ndarray
    # decision structure
    T: int
    L: int
    sigma0: int  # initial lane id
    idx_state: np.ndarray  # (T+1, 4)
    idx_input: np.ndarray  # (T, 2)
    idx_b: np.ndarray  # (T, 3) for alpha in (-1, 0, +1)
    idx_z: np.ndarray  # (T, L): one-hot of z(tau+1)
    idx_xi_lv: np.ndarray  # (T, L), -1 where fixed absent
    idx_xi_nv: np.ndarray
    coeffs: SoftCoefficients
    big_m: float
    vx_max: float

    @property
    def binary_count(self) -> int:
        return int(np.sum(self.is_binary))

    @property
    def free_binaries(self) -> np.ndarray:
        return np.where(self.is_binary & (self.lb != self.ub))[0]

    def target_lane_var(self, tau: int, lane_id: int) -> int:
        return int(self.idx_z[tau, lane_id - 1])

    def check_psd(self, tol: float = 1e-8) -> float:
        """Smallest eigenvalue of H; raises if meaningfully negative."""
        dense = self.H.toarray()
        lam = float(np.linalg.eigvalsh(dense)[0])
        if lam < -tol * max(1.0, float(np.abs(dense).max())):
            raise MiqpBuildError(f"objective Hessian is not PSD (min eig {lam:.3e})")
        return lam

    def dump(self, path) -> None:
        """Plain-text model listing for external cross-checking.

        Format: `var <i> <name> <lb> <ub> <binary>`, `obj_const <c>`,
        `obj_lin <i> <coef>`, `obj_quad <i> <j> <coef>` (0.5 x'Hx convention,
        upper triangle of H), `row <k> <l> <u> <i>:<coef>...`.
        """
        lines = [f"# laneopt miqp dump v1", f"vars {self.n}", f"rows {self.A.shape[0]}"]
        for i in range(self.n):
            lines.append(
                f"var {i} {self.names[i]} {self.lb[i]!r} {self.ub[i]!r} "
                f"{int(self.is_binary[i])}"
            )
        lines.append(f"obj_const {self.constant!r}")
        for i in np.nonzero(self.g)[0]:
            lines.append(f"obj_lin {i} {self.g[i]!r}")
        Hc = sp.coo_matrix(self.H)
        for i, j, v in sorted(zip(Hc.row, Hc.col, Hc.data)):
            if j >= i:
                lines.append(f"obj_quad {i} {j} {v!r}")
        Ac = self.A.tocsr()
        for k in range(Ac.shape[0]):
            row = Ac.getrow(k)
            terms = " ".join(f"{i}:{v!r}" for i, v in zip(row.indices, row.data))
            lines.append(f"row {k} {self.rl[k]!r} {self.ru[k]!r} {terms}")
        Path(path).write_text("\n".join(lines) + "\n")


class _Builder:
    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.binary: list[bool] = []
        self.h_i: list[int] = []
        self.h_j: list[int] = []
        self.h_v: list[float] = []
        self.g: dict[int, float] = {}
        self.const = 0.0
        self.rows: list[tuple[dict[int, float], float, float]] = []

    def var(self, name: str, lb: float, ub: float, binary: bool = False) -> int:
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.binary.append(binary)
        return len(self.names) - 1

    def add_sq_affine(self, idxs, coefs, offset: float, weight: float) -> None:
        """Add weight * (sum coefs[i] x[idxs[i]] + offset)^2 to the objective."""
        if weight == 0.0:
            return
        for p, (ip, cp) in enumerate(zip(idxs, coefs)):
            for iq, cq in zip(idxs[p:], coefs[p:]):
                v = 2.0 * weight * cp * cq
                self.h_i.append(ip)
                self.h_j.append(iq)
                self.h_v.append(v)
                if ip != iq:
                    self.h_i.append(iq)
                    self.h_j.append(ip)
                    self.h_v.append(v)
            if offset != 0.0:
                self.g[ip] = self.g.get(ip, 0.0) + 2.0 * weight * offset * cp
        self.const += weight * offset * offset

    def add_quad_diag(self, idx: int, weight: float) -> None:
        if weight == 0.0:
            return
        self.h_i.append(idx)
        self.h_j.append(idx)
        self.h_v.append(2.0 * weight)

    def add_lin(self, idx: int, coef: float) -> None:
        if coef != 0.0:
            self.g[idx] = self.g.get(idx, 0.0) + coef

    def row(self, terms: dict[int, float], lo: float, hi: float) -> None:
        self.rows.append((terms, lo, hi))


def build_decision_miqp(
    scenario: ScenarioConfig,
    weights: DecisionWeights | None = None,
    options: StageOneOptions | None = None,
    coeffs: SoftCoefficients | None = None,
) -> MiqpModel:
    """Assemble the lane-decision MIQP for one planning horizon.

    Raises MiqpBuildError for configurations infeasible by construction and
    certifies the objective Hessian PSD before returning.
    """
    w = scenario.decision_weights if weights is None else weights
    opts = scenario.stage_one if options is None else options
    T = scenario.horizon.T
    L = len(scenario.road)
    dt = scenario.horizon.dt_decision
    veh = scenario.vehicle
    try:
        sigma0 = scenario.ev_lane().id
    except ScenarioError as exc:
        raise MiqpBuildError(f"initial lane outside road: {exc}") from exc
    if coeffs is None:
        coeffs = precompute_soft_coefficients(scenario, scenario.predictions())

    x0 = to_linear(scenario.ev_init)
    vx_max = scenario.max_speed_limit
    sv_speed = max((abs(sv.vx) for sv in scenario.svs), default=0.0)
    M = w.big_m if w.big_m is not None else 2.0 * (vx_max + sv_speed) + 1.0
    eps_strict = w.epsilon_strict
    centers = np.array([lane.center_y for lane in scenario.road])

    b = _Builder()
    idx_state = np.array(
        [[b.var(f"x{tau}_{c}", -INF, INF) for c in ("px", "py", "vx", "vy")] for tau in range(T + 1)]
    )
    idx_input = np.array(
        [[b.var(f"u{tau}_ax", veh.ax_min, veh.ax_max), b.var(f"u{tau}_ay", veh.ay_min, veh.ay_max)]
         for tau in range(T)]
    )
    idx_b = np.array(
        [[b.var(f"b{tau}_{a}", 0.0, 1.0, binary=True) for a in (-1, 0, 1)] for tau in range(T)]
    )
    idx_z = np.array(
        [[b.var(f"z{tau + 1}_l{k + 1}", 0.0, 1.0, binary=True) for k in range(L)] for tau in range(T)]
    )
    idx_xi_lv = np.full((T, L), -1, dtype=int)
    idx_xi_nv = np.full((T, L), -1, dtype=int)
    for tau in range(T):
        for k in range(L):
            free = bool(coeffs.has_lv[k, tau])
            idx_xi_lv[tau, k] = b.var(f"xiLV{tau}_l{k + 1}", 0.0, 1.0 if free else 0.0, binary=True)
            free = bool(coeffs.has_nv[k, tau])
            idx_xi_nv[tau, k] = b.var(f"xiNV{tau}_l{k + 1}", 0.0, 1.0 if free else 0.0, binary=True)
    idx_e_lv = {}
    idx_e_nv = {}
    idx_y_nv = {}
    for tau in range(T):
        for k in range(L):
            if coeffs.has_lv[k, tau] and w.speed_lv > 0.0:
                idx_e_lv[(tau, k)] = b.var(f"eLV{tau}_l{k + 1}", 0.0, INF)
            if coeffs.has_nv[k, tau] and w.speed_nv > 0.0:
                idx_e_nv[(tau, k)] = b.var(f"eNV{tau}_l{k + 1}", 0.0, INF)
            if coeffs.has_nv[k, tau] and coeffs.kappa_nv[k, tau] > 0.0:
                idx_y_nv[(tau, k)] = b.var(f"yNV{tau}_l{k + 1}", 0.0, 1.0)

    # initial proxy state pinned through bounds
    for c in range(4):
        i = idx_state[0, c]
        b.lb[i] = b.ub[i] = float(x0[c])
    for tau in range(1, T + 1):
        i = idx_state[tau, 2]
        b.lb[i], b.ub[i] = 0.0, vx_max

    # boundary fixings at tau = 0 come from the constant initial lane
    if sigma0 == 1:
        b.ub[idx_b[0, 0]] = 0.0
    if sigma0 == L:
        b.ub[idx_b[0, 2]] = 0.0
    if L == 1:
        for tau in range(T):
            b.ub[idx_b[tau, 0]] = 0.0
            b.ub[idx_b[tau, 2]] = 0.0

    Ad, Bd = discrete_proxy_matrices(dt, opts.zoh_positions)
    for tau in range(T):
        for r in range(4):
            terms = {int(idx_state[tau + 1, r]): 1.0}
            for cth in range(4):
                if Ad[r, cth] != 0.0:
                    terms[int(idx_state[tau, cth])] = terms.get(int(idx_state[tau, cth]), 0.0) - Ad[r, cth]
            for cth in range(2):
                if Bd[r, cth] != 0.0:
                    terms[int(idx_input[tau, cth])] = -Bd[r, cth]
            b.row(terms, 0.0, 0.0)

    for tau in range(T):
        b.row({int(i): 1.0 for i in idx_b[tau]}, 1.0, 1.0)
        b.row({int(i): 1.0 for i in idx_z[tau]}, 1.0, 1.0)

    # occupancy index coupling: sum_k k z_k(tau+1) = sum_k k z_k(tau) + alpha(tau)
    for tau in range(T):
        terms = {int(idx_z[tau, k]): float(k + 1) for k in range(L)}
        terms[int(idx_b[tau, 0])] = 1.0  # -alpha with alpha = -1
        terms[int(idx_b[tau, 2])] = -1.0
        if tau == 0:
            b.row(terms, float(sigma0), float(sigma0))
        else:
            for k in range(L):
                terms[int(idx_z[tau - 1, k])] = terms.get(int(idx_z[tau - 1, k]), 0.0) - float(k + 1)
            b.row(terms, 0.0, 0.0)

    # forward-motion proxy constraint, applied to planner-produced states
    rho = veh.rho
    for tau in range(1, T + 1):
        vx, vy = int(idx_state[tau, 2]), int(idx_state[tau, 3])
        b.row({vx: 1.0, vy: -rho}, 0.0, INF)
        b.row({vx: 1.0, vy: rho}, 0.0, INF)

    # boundary lanes for tau >= 1 (occupied-lane one-hot is a variable there)
    for tau in range(1, T):
        b.row({int(idx_b[tau, 0]): 1.0, int(idx_z[tau - 1, 0]): 1.0}, -INF, 1.0)
        b.row({int(idx_b[tau, 2]): 1.0, int(idx_z[tau - 1, L - 1]): 1.0}, -INF, 1.0)

    if opts.dwell_steps > 1:
        d = opts.dwell_steps
        for tau in range(T - 1):
            window = range(tau, min(tau + d, T))
            terms: dict[int, float] = {}
            for s in window:
                terms[int(idx_b[s, 0])] = 1.0
                terms[int(idx_b[s, 2])] = 1.0
            b.row(terms, -INF, 1.0)

    # big-M sign splits and gated deviation rows, all on the target lane;
    # every constant is the smallest valid bound of its own row's quantity
    # over vx in [0, vx_max], which tightens the relaxations big-M admits
    def tight(v: float) -> float:
        return min(M, max(1e-3, v))

    for tau in range(T):
        vx = int(idx_state[tau, 2])
        b0 = int(idx_b[tau, 1])
        for k in range(L):
            zp = int(idx_z[tau, k])
            if coeffs.has_lv[k, tau]:
                xi = int(idx_xi_lv[tau, k])
                v_sv = float(coeffs.v_lv[k, tau])
                m_a = tight(vx_max - v_sv)  # releases d >= -m*xi when slower
                m_b = tight(v_sv + 2.0 * eps_strict)  # releases d <= m(1-xi)-eps
                m_e = tight(max(v_sv, vx_max - v_sv))
                b.row({vx: -1.0, xi: m_a, zp: -m_a}, -m_a - v_sv, INF)
                b.row({vx: -1.0, xi: m_b, zp: m_b}, -INF, 2.0 * m_b - eps_strict - v_sv)
                if (tau, k) in idx_e_lv:
                    e = idx_e_lv[(tau, k)]
                    b.row({e: 1.0, vx: 1.0, xi: -m_e, zp: -m_e}, v_sv - 2.0 * m_e, INF)
                    b.row({e: 1.0, vx: -1.0, xi: -m_e, zp: -m_e}, -v_sv - 2.0 * m_e, INF)
            if coeffs.has_nv[k, tau]:
                xi = int(idx_xi_nv[tau, k])
                v_sv = float(coeffs.v_nv[k, tau])
                m_a = tight(eps_strict + vx_max - v_sv)
                m_b = tight(v_sv)
                m_e = tight(max(v_sv, vx_max - v_sv))
                b.row({vx: -1.0, xi: -m_a, zp: -m_a}, eps_strict - 2.0 * m_a - v_sv, INF)
                b.row({vx: -1.0, xi: -m_b, zp: m_b}, -INF, m_b - v_sv)
                if (tau, k) in idx_e_nv:
                    e = idx_e_nv[(tau, k)]
                    b.row({e: 1.0, vx: 1.0, xi: -m_e, zp: -m_e, b0: m_e}, v_sv - 2.0 * m_e, INF)
                    b.row({e: 1.0, vx: -1.0, xi: -m_e, zp: -m_e, b0: m_e}, -v_sv - 2.0 * m_e, INF)
            if (tau, k) in idx_y_nv:
                y = idx_y_nv[(tau, k)]
                b.row({y: 1.0, zp: -1.0, b0: 1.0}, 0.0, INF)
                b.row({y: 1.0, zp: -1.0}, -INF, 0.0)
                b.row({y: 1.0, b0: 1.0}, -INF, 1.0)

    # objective
    nominal = nominal_rollout(scenario)
    for tau in range(T):
        py = int(idx_state[tau, 1])
        vx = int(idx_state[tau, 2])
        zs = [int(idx_z[tau, k]) for k in range(L)]
        b.add_sq_affine([py] + zs, [1.0] + [-float(c) for c in centers], 0.0, w.track_y)
        if w.track_x > 0.0:
            px = int(idx_state[tau, 0])
            b.add_sq_affine([px], [1.0], -float(nominal[tau, 0]), w.track_x)
        b.add_sq_affine(
            [vx] + zs, [1.0] + [-float(coeffs.v_ref[k, tau]) for k in range(L)], 0.0, w.velocity
        )
        b.add_quad_diag(int(idx_input[tau, 0]), w.accel_x)
        b.add_quad_diag(int(idx_input[tau, 1]), w.accel_y)
        for k in range(L):
            if coeffs.kappa_lv[k, tau] > 0.0:
                b.add_lin(int(idx_z[tau, k]), float(coeffs.kappa_lv[k, tau]))
            if (tau, k) in idx_y_nv:
                # quadratic in the gate variable: identical on binary points,
                # strictly convex on the relaxation
                b.add_quad_diag(idx_y_nv[(tau, k)], float(coeffs.kappa_nv[k, tau]))
            if (tau, k) in idx_e_lv:
                b.add_quad_diag(idx_e_lv[(tau, k)], w.speed_lv)
            if (tau, k) in idx_e_nv:
                b.add_quad_diag(idx_e_nv[(tau, k)], w.speed_nv)

    if opts.binary_curvature > 0.0:
        for i, is_bin in enumerate(b.binary):
            if is_bin:
                b.add_quad_diag(i, opts.binary_curvature)
                b.add_lin(i, -opts.binary_curvature)

    n = len(b.names)
    rows = len(b.rows)
    a_i, a_j, a_v = [], [], []
    rl = np.empty(rows)
    ru = np.empty(rows)
    for r, (terms, lo, hi) in enumerate(b.rows):
        rl[r], ru[r] = lo, hi
        for j, v in terms.items():
            a_i.append(r)
            a_j.append(j)
            a_v.append(v)
    g = np.zeros(n)
    for j, v in b.g.items():
        g[j] = v

    model = MiqpModel(
        scenario=scenario,
        n=n,
        names=b.names,
        lb=np.array(b.lb),
        ub=np.array(b.ub),
        is_binary=np.array(b.binary, dtype=bool),
        H=sp.csc_matrix(sp.coo_matrix((b.h_v, (b.h_i, b.h_j)), shape=(n, n))),
        g=g,
        constant=b.const,
        A=sp.csc_matrix(sp.coo_matrix((a_v, (a_i, a_j)), shape=(rows, n))),
        rl=rl,
        ru=ru,
        T=T,
        L=L,
        sigma0=sigma0,
        idx_state=idx_state,
        idx_input=idx_input,
        idx_b=idx_b,
        idx_z=idx_z,
        idx_xi_lv=idx_xi_lv,
        idx_xi_nv=idx_xi_nv,
        coeffs=coeffs,
        big_m=M,
        vx_max=vx_max,
    )
    model.check_psd()
    return model


@dataclass(frozen=True)
class DecisionSequence:
    """Stage-one output: per-step decisions with derived references."""

    alpha: np.ndarray  # (T,) in {-1, 0, +1}
    occupied: np.ndarray  # (T+1,) lane ids
    ref_lane: np.ndarray  # (T,) target lane per step
    v_ref: np.ndarray  # (T,)
    y_ref: np.ndarray  # (T,) target lane centers
    states: np.ndarray  # (T+1, 4) proxy rollout
    inputs: np.ndarray  # (T, 2)
    objective: float

    def contains(self, *moves: int) -> bool:
        """True when `moves` appears as a subsequence of the change events."""
        events = [a for a in self.alpha if a != 0]
        it = iter(events)
        return all(any(m == e for e in it) for m in moves)


@dataclass(frozen=True)
class ReferenceProfile:
    """Trajectory-grid references: lane center hold, interpolated speed."""

    t: np.ndarray  # (N+1,)
    px_ref: np.ndarray
    py_ref: np.ndarray
    vx_ref: np.ndarray
    lane_id: np.ndarray  # (N+1,) ints


def extract_decisions(
    model: MiqpModel, solution: np.ndarray, scenario: ScenarioConfig | None = None,
    integrality_tol: float = 1e-5,
) -> DecisionSequence:
    """Read the decision sequence out of a solver assignment.

    Raises ExtractionError when binaries are fractional beyond tolerance or
    the one-hot structure is violated.
    """
    sc = model.scenario if scenario is None else scenario
    bvals = solution[model.idx_b]
    if np.any(np.abs(bvals - np.round(bvals)) > integrality_tol):
        worst = float(np.max(np.abs(bvals - np.round(bvals))))
        raise ExtractionError(f"non-integral decision binaries (max dev {worst:.2e})")
    bint = np.round(bvals).astype(int)
    if np.any(bint.sum(axis=1) != 1):
        raise ExtractionError("decision one-hot violated")
    alpha = np.array([int(np.argmax(row)) - 1 for row in bint])
    occupied = np.empty(model.T + 1, dtype=int)
    occupied[0] = model.sigma0
    for tau in range(model.T):
        occupied[tau + 1] = occupied[tau] + alpha[tau]
        if not 1 <= occupied[tau + 1] <= model.L:
            raise ExtractionError(f"occupied lane {occupied[tau + 1]} outside road at step {tau}")
    zvals = solution[model.idx_z]
    zint = np.round(zvals).astype(int)
    for tau in range(model.T):
        if np.abs(zvals[tau] - zint[tau]).max() > integrality_tol or zint[tau].sum() != 1:
            raise ExtractionError(f"occupancy one-hot violated at step {tau}")
        if int(np.argmax(zint[tau])) + 1 != occupied[tau + 1]:
            raise ExtractionError(f"occupancy disagrees with decision cumsum at step {tau}")
    ref_lane = occupied[1:].copy()
    v_ref = np.array([model.coeffs.v_ref[ref_lane[tau] - 1, tau] for tau in range(model.T)])
    y_ref = np.array([sc.road[ref_lane[tau] - 1].center_y for tau in range(model.T)])
    states = solution[model.idx_state]
    inputs = solution[model.idx_input]
    objective = float(0.5 * solution @ (model.H @ solution) + model.g @ solution + model.constant)
    return DecisionSequence(
        alpha=alpha, occupied=occupied, ref_lane=ref_lane, v_ref=v_ref, y_ref=y_ref,
        states=states, inputs=inputs, objective=objective,
    )


def upsample_references(
    seq: DecisionSequence, scenario: ScenarioConfig
) -> ReferenceProfile:
    """Decision grid -> trajectory grid: hold the lane, interpolate the speed."""
    hz = scenario.horizon
    t = np.arange(hz.N + 1) * hz.dt_traj
    knots = np.arange(hz.T) * hz.dt_decision
    vx_ref = np.interp(t, knots, seq.v_ref)
    dec_idx = np.minimum((t / hz.dt_decision).astype(int), hz.T - 1)
    lane_id = seq.ref_lane[dec_idx]
    py_ref = np.array([scenario.road[l - 1].center_y for l in lane_id])
    px0 = scenario.ev_init.px
    px_ref = px0 + np.concatenate([[0.0], np.cumsum(0.5 * (vx_ref[1:] + vx_ref[:-1]) * hz.dt_traj)])
    return ReferenceProfile(t=t, px_ref=px_ref, py_ref=py_ref, vx_ref=vx_ref, lane_id=lane_id)


def fixed_lane_references(
    scenario: ScenarioConfig, lane_offset: int
) -> tuple[DecisionSequence, ReferenceProfile]:
    """References that track a pre-selected lane (current + offset, clamped).

    The reference velocity still follows the lane's lead vehicle along the
    nominal rollout; used by the fixed-lane planner variants.
    """
    T = scenario.horizon.T
    sigma0 = scenario.ev_lane().id
    target = min(max(sigma0 + lane_offset, 1), len(scenario.road))
    coeffs = precompute_soft_coefficients(scenario, scenario.predictions())
    alpha = np.zeros(T, dtype=int)
    if target != sigma0:
        alpha[0] = target - sigma0
    occupied = np.empty(T + 1, dtype=int)
    occupied[0] = sigma0
    occupied[1:] = target
    ref_lane = occupied[1:].copy()
    v_ref = np.array([coeffs.v_ref[target - 1, tau] for tau in range(T)])
    y_ref = np.full(T, scenario.road[target - 1].center_y)
    x0 = to_linear(scenario.ev_init)
    states = np.tile(x0, (T + 1, 1))
    seq = DecisionSequence(
        alpha=alpha, occupied=occupied, ref_lane=ref_lane, v_ref=v_ref, y_ref=y_ref,
        states=states, inputs=np.zeros((T, 2)), objective=float("nan"),
    )
    return seq, upsample_references(seq, scenario)


def stage_one_cost(model: MiqpModel, solution: np.ndarray) -> float:
    """Recompute the objective of an integral assignment from first principles.

    Independent of the assembled (H, g, constant): evaluates tracking,
    efficiency, comfort, gated speed penalties and distance penalties directly
    from the decision structure. Used to cross-check the quadratic assembly.
    """
    sc = model.scenario
    w = sc.decision_weights
    co = model.coeffs
    seq = extract_decisions(model, solution)
    centers = np.array([lane.center_y for lane in sc.road])
    nominal = nominal_rollout(sc)
    total = 0.0
    for tau in range(model.T):
        k = seq.ref_lane[tau] - 1
        py = solution[model.idx_state[tau, 1]]
        vx = solution[model.idx_state[tau, 2]]
        ax, ay = solution[model.idx_input[tau]]
        total += w.track_y * (py - centers[k]) ** 2
        if w.track_x > 0.0:
            px = solution[model.idx_state[tau, 0]]
            total += w.track_x * (px - nominal[tau, 0]) ** 2
        total += w.velocity * (vx - co.v_ref[k, tau]) ** 2
        total += w.accel_x * ax**2 + w.accel_y * ay**2
        total += co.kappa_lv[k, tau]
        changing = seq.alpha[tau] != 0
        if changing and co.has_nv[k, tau]:
            total += co.kappa_nv[k, tau]
        if co.has_lv[k, tau] and w.speed_lv > 0.0:
            xi = round(float(solution[model.idx_xi_lv[tau, k]]))
            if xi == 1:
                total += w.speed_lv * (co.v_lv[k, tau] - vx) ** 2
        if co.has_nv[k, tau] and w.speed_nv > 0.0 and changing:
            xi = round(float(solution[model.idx_xi_nv[tau, k]]))
            if xi == 1:
                total += w.speed_nv * (co.v_nv[k, tau] - vx) ** 2
    return float(total)
