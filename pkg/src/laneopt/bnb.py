"""Best-first branch-and-bound over convex QP relaxations of the stage-one
model, with logical propagation on the decision structure, rounded-and-repaired
incumbents, warm-started node solves, and an exhaustive enumeration oracle."""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .miqp import DecisionSequence, MiqpModel, extract_decisions, precompute_soft_coefficients
from .vehicle import to_linear
from .miqp import build_decision_miqp
from .params import SolverParams
from .qp import INFEASIBLE, ITERATION_LIMIT, OPTIMAL, BoxQp, QpSolution

log = logging.getLogger("laneopt.bnb")

OPTIMAL_STATUS = "optimal"
NODE_LIMIT = "node-limit"


class MiqpInfeasibleError(RuntimeError):
    """The model admits no integral feasible assignment."""


class OracleLimitError(RuntimeError):
    """enumerate_oracle called with more free binaries than its limit."""


@dataclass
class BbNode:
    """One search node: fixings plus the cached relaxation at those fixings."""

    fixings: dict[int, int]
    depth: int
    bound: float
    relax: QpSolution


def _safe_bound(sol: QpSolution) -> float:
    """Node lower bound; unpolished solves get a residual-sized safety margin."""
    if sol.polished:
        return sol.objective
    slack = max(sol.r_prim, sol.r_dual, 1e-9)
    return sol.objective - 10.0 * slack * max(1.0, abs(sol.objective))


def _incumbent_candidate(model: MiqpModel, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Snap binaries to integers and re-evaluate the exact model objective."""
    xi = x.copy()
    xi[model.is_binary] = np.round(xi[model.is_binary])
    obj = float(0.5 * xi @ (model.H @ xi) + model.g @ xi + model.constant)
    return obj, xi


@dataclass
class BnbResult:
    solution: np.ndarray
    objective: float
    gap: float
    node_count: int
    status: str
    nodes: list[BbNode] = field(default_factory=list, repr=False)


class MiqpQp:
    """QP relaxation engine for one model; the KKT factorization is shared by
    every node because fixings only move bounds."""

    def __init__(self, model: MiqpModel, params: SolverParams):
        self.model = model
        self.params = params
        n = model.n
        bounded = np.where(np.isfinite(model.lb) | np.isfinite(model.ub) | model.is_binary)[0]
        self.bound_rows = {int(v): model.A.shape[0] + r for r, v in enumerate(bounded)}
        eye = sp.csr_matrix(
            (np.ones(len(bounded)), (np.arange(len(bounded)), bounded)), shape=(len(bounded), n)
        )
        A = sp.vstack([model.A, eye], format="csc")
        self.l0 = np.concatenate([model.rl, model.lb[bounded]])
        self.u0 = np.concatenate([model.ru, model.ub[bounded]])
        self.qp = BoxQp(
            model.H, model.g, A, self.l0, self.u0, model.constant,
            rho=params.qp_rho, alpha=params.qp_alpha,
        )

    def solve(
        self, fixings: dict[int, int], warm=None, active_hint=None,
        max_iter: int | None = None,
    ) -> QpSolution:
        l = self.l0.copy()
        u = self.u0.copy()
        for var, val in fixings.items():
            r = self.bound_rows[var]
            l[r] = u[r] = float(val)
        return self.qp.solve(
            l=l, u=u, warm=warm, active_hint=active_hint,
            max_iter=max_iter if max_iter is not None else self.params.qp_iter_limit,
            feas_tol=self.params.feas_tol,
        )


def _engine(model: MiqpModel, params: SolverParams) -> MiqpQp:
    cached = getattr(model, "_qp_engine", None)
    if cached is None or cached.params is not params:
        cached = MiqpQp(model, params)
        model._qp_engine = cached
    return cached


def solve_qp_relaxation(
    model: MiqpModel, fixings: dict[int, int], params: SolverParams | None = None,
    warm=None,
) -> QpSolution:
    """Convex relaxation with the given binaries fixed, the rest in [0, 1]."""
    params = params or model.scenario.solver
    return _engine(model, params).solve(dict(fixings), warm=warm)


def propagate(model: MiqpModel, fixings: dict[int, int]) -> dict[int, int] | None:
    """Close fixings under one-hot groups, lane transitions and boundaries.

    Returns the extended fixing map, or None on a logical contradiction.
    """
    T, L = model.T, model.L
    val: dict[int, int] = {}
    for i in np.where(model.is_binary & (model.lb == model.ub))[0]:
        val[int(i)] = int(model.lb[i])
    for k, v in fixings.items():
        if val.get(k, v) != v:
            return None
        val[int(k)] = int(v)

    groups = [[int(i) for i in model.idx_b[tau]] for tau in range(T)]
    groups += [[int(i) for i in model.idx_z[tau]] for tau in range(T)]

    changed = True
    while changed:
        changed = False
        for grp in groups:
            ones = [i for i in grp if val.get(i) == 1]
            if len(ones) > 1:
                return None
            unknown = [i for i in grp if i not in val]
            if ones:
                for i in grp:
                    if i not in val:
                        val[i] = 1 if i == ones[0] else 0
                        changed = True
                    elif val[i] == 1 and i != ones[0]:
                        return None
            elif not unknown:
                return None  # all zero violates the one-hot
            elif len(unknown) == 1 and all(val.get(i) == 0 for i in grp if i != unknown[0]):
                val[unknown[0]] = 1
                changed = True

        def lane_at(tau: int) -> int | None:
            if tau == 0:
                return model.sigma0
            for k in range(L):
                if val.get(int(model.idx_z[tau - 1, k])) == 1:
                    return k + 1
            return None

        def alpha_at(tau: int) -> int | None:
            for j, a in enumerate((-1, 0, 1)):
                if val.get(int(model.idx_b[tau, j])) == 1:
                    return a
            return None

        for tau in range(T):
            sig = lane_at(tau)
            a = alpha_at(tau)
            nxt = lane_at(tau + 1)
            if sig is not None and a is not None:
                want = sig + a
                if not 1 <= want <= L:
                    return None
                if nxt is None:
                    i = int(model.idx_z[tau, want - 1])
                    if val.get(i) == 0:
                        return None
                    if i not in val:
                        val[i] = 1
                        changed = True
                elif nxt != want:
                    return None
            elif sig is not None and nxt is not None:
                a_need = nxt - sig
                if abs(a_need) > 1:
                    return None
                i = int(model.idx_b[tau, a_need + 1])
                if val.get(i) == 0:
                    return None
                if i not in val:
                    val[i] = 1
                    changed = True
            if sig == 1:
                i = int(model.idx_b[tau, 0])
                if val.get(i) == 1:
                    return None
                if i not in val:
                    val[i] = 0
                    changed = True
            if sig == L:
                i = int(model.idx_b[tau, 2])
                if val.get(i) == 1:
                    return None
                if i not in val:
                    val[i] = 0
                    changed = True
            # a target one-hot fixed to 1 pins the occupied lane downstream
        for tau in range(T):
            sig_next = lane_at(tau + 1)
            if sig_next is not None:
                for k in range(L):
                    i = int(model.idx_z[tau, k])
                    want = 1 if k + 1 == sig_next else 0
                    if val.get(i, want) != want:
                        return None
                    if i not in val:
                        val[i] = want
                        changed = True
        # non-target gates are objective-neutral: canonicalize them to 0
        for tau in range(T):
            for k in range(L):
                if val.get(int(model.idx_z[tau, k])) == 0:
                    for xi_idx in (model.idx_xi_lv[tau, k], model.idx_xi_nv[tau, k]):
                        i = int(xi_idx)
                        if i >= 0 and i not in val and model.lb[i] != model.ub[i]:
                            val[i] = 0
                            changed = True
    return val


def vx_chain_infeasible(model: MiqpModel, fixings: dict[int, int]) -> bool:
    """Interval presolve on the speed chain under fixed gates.

    Fixed sign gates on a fixed target lane pin vx(tau) into an interval;
    the acceleration box limits per-step movement. An empty chain proves the
    fixing set infeasible without a QP solve.
    """
    sc = model.scenario
    dt = sc.horizon.dt_decision
    up = sc.vehicle.ax_max * dt
    dn = sc.vehicle.ax_min * dt
    eps = sc.decision_weights.epsilon_strict
    T = model.T
    vx0 = float(to_linear(sc.ev_init)[2])
    lo = np.zeros(T + 1)
    hi = np.full(T + 1, model.vx_max)
    lo[0] = hi[0] = vx0
    for tau in range(T):
        target = None
        for k in range(model.L):
            if fixings.get(int(model.idx_z[tau, k])) == 1:
                target = k
        if target is None:
            continue
        i = int(model.idx_xi_lv[tau, target])
        if i >= 0 and model.coeffs.has_lv[target, tau]:
            v_sv = float(model.coeffs.v_lv[target, tau])
            if fixings.get(i) == 0:
                hi[tau] = min(hi[tau], v_sv)
            elif fixings.get(i) == 1:
                lo[tau] = max(lo[tau], v_sv + eps)
        i = int(model.idx_xi_nv[tau, target])
        if i >= 0 and model.coeffs.has_nv[target, tau]:
            v_sv = float(model.coeffs.v_nv[target, tau])
            if fixings.get(i) == 1:
                hi[tau] = min(hi[tau], v_sv - eps)
            elif fixings.get(i) == 0:
                lo[tau] = max(lo[tau], v_sv)
    for tau in range(T):
        lo[tau + 1] = max(lo[tau + 1], lo[tau] + dn)
        hi[tau + 1] = min(hi[tau + 1], hi[tau] + up)
    for tau in range(T - 1, -1, -1):
        lo[tau] = max(lo[tau], lo[tau + 1] - up)
        hi[tau] = min(hi[tau], hi[tau + 1] - dn)
    return bool(np.any(lo > hi + 1e-9))


def _word_fixings(model: MiqpModel, alpha: np.ndarray) -> dict[int, int] | None:
    """Fix the b and z binaries of a full decision word (alpha per step)."""
    fix: dict[int, int] = {}
    sigma = model.sigma0
    for tau in range(model.T):
        a = int(alpha[tau])
        if not 1 <= sigma + a <= model.L:
            return None
        for j, av in enumerate((-1, 0, 1)):
            fix[int(model.idx_b[tau, j])] = 1 if av == a else 0
        sigma += a
        for k in range(model.L):
            fix[int(model.idx_z[tau, k])] = 1 if k + 1 == sigma else 0
    return fix


def _repair(
    engine: MiqpQp, model: MiqpModel, relax: QpSolution, fixings: dict[int, int]
) -> tuple[float, np.ndarray] | None:
    """Round the relaxation into a consistent word, resolve gates, re-solve."""
    x = relax.x
    alpha = np.empty(model.T, dtype=int)
    sigma = model.sigma0
    for tau in range(model.T):
        forced = None
        for j in range(3):
            if fixings.get(int(model.idx_b[tau, j])) == 1:
                forced = j - 1
        if forced is not None:
            a = forced
        else:
            vals = x[model.idx_b[tau]].copy()
            for j, av in enumerate((-1, 0, 1)):
                if not 1 <= sigma + av <= model.L or fixings.get(int(model.idx_b[tau, j])) == 0:
                    vals[j] = -np.inf
            if not np.isfinite(vals).any():
                return None
            a = int(np.argmax(vals)) - 1
        if not 1 <= sigma + a <= model.L:
            return None
        alpha[tau] = a
        sigma += a
    full = _word_fixings(model, alpha)
    if full is None:
        return None
    eps = model.scenario.decision_weights.epsilon_strict
    sigma_path = np.cumsum(np.concatenate([[model.sigma0], alpha]))
    for tau in range(model.T):
        k = int(sigma_path[tau + 1]) - 1
        vx = float(x[model.idx_state[tau, 2]])
        for idx_xi, v_sv, has in (
            (model.idx_xi_lv, model.coeffs.v_lv, model.coeffs.has_lv),
            (model.idx_xi_nv, model.coeffs.v_nv, model.coeffs.has_nv),
        ):
            for kk in range(model.L):
                i = int(idx_xi[tau, kk])
                if i < 0 or model.lb[i] == model.ub[i]:
                    continue
                if kk != k:
                    full[i] = 0
                elif idx_xi is model.idx_xi_lv:
                    full[i] = 1 if v_sv[kk, tau] - vx <= -eps else 0
                else:
                    full[i] = 1 if v_sv[kk, tau] - vx >= eps else 0
    for var, v in fixings.items():
        if full.get(var, v) != v:
            return None
    if vx_chain_infeasible(model, full):
        return None
    hint = (
        (relax.active_low, relax.active_upp) if relax.active_low is not None else None
    )
    sol = engine.solve(full, active_hint=hint)
    if sol.status != OPTIMAL:
        return None
    return _incumbent_candidate(model, sol.x)


def _select_branch_var(model: MiqpModel, x: np.ndarray, free: list[int], tol: float) -> int:
    """Most-fractional rule, preferring the decision binaries: fixing a
    lane-change binary lets propagation collapse the occupancy and gate
    structure, which keeps child relaxations well conditioned."""
    free_arr = np.asarray(free)
    fracs = np.abs(x[free_arr] - np.round(x[free_arr]))
    b_set = set(int(i) for i in model.idx_b.ravel())
    b_mask = np.fromiter((int(i) in b_set for i in free_arr), dtype=bool, count=len(free_arr))
    cand = np.where(b_mask & (fracs > tol))[0]
    if len(cand):
        return int(free_arr[cand[int(np.argmax(fracs[cand]))]])
    return int(free_arr[int(np.argmax(fracs))])


def _is_integral(model: MiqpModel, x: np.ndarray, tol: float) -> bool:
    vals = x[model.is_binary]
    return bool(np.all(np.abs(vals - np.round(vals)) <= tol))


def branch_and_bound(
    model: MiqpModel,
    params: SolverParams | None = None,
    warm_word: np.ndarray | None = None,
    keep_nodes: bool = False,
) -> BnbResult:
    """Exact search to the configured relative gap; deterministic across runs."""
    params = params or model.scenario.solver
    engine = _engine(model, params)
    gap_of = lambda inc, bnd: (inc - bnd) / max(1.0, abs(inc))

    incumbent: tuple[float, np.ndarray] | None = None
    node_count = 0
    kept: list[BbNode] = []

    root_fix = propagate(model, {})
    if root_fix is None:
        raise MiqpInfeasibleError("decision structure is contradictory")
    root_relax = engine.solve(root_fix)
    node_count += 1
    if root_relax.status == INFEASIBLE:
        raise MiqpInfeasibleError("root relaxation is infeasible")
    root = BbNode(root_fix, 0, _safe_bound(root_relax), root_relax)
    if keep_nodes:
        kept.append(root)

    if warm_word is not None:
        wf = _word_fixings(model, warm_word)
        if wf is not None:
            merged = propagate(model, wf)
            if merged is not None:
                cand = _repair(engine, model, root_relax, merged)
                if cand is not None:
                    incumbent = cand

    heap: list[tuple[float, int, int, BbNode]] = []
    seq = 0
    heapq.heappush(heap, (root.bound, -root.depth, seq, root))
    status = OPTIMAL_STATUS
    best_bound = root.bound

    while heap:
        bound, _, _, node = heapq.heappop(heap)
        best_bound = bound
        if incumbent is not None and bound >= incumbent[0] - params.gap_tol * max(
            1.0, abs(incumbent[0])
        ):
            best_bound = incumbent[0] if not heap else bound
            break
        if node_count >= params.node_limit:
            status = NODE_LIMIT
            break

        relax = node.relax
        if _is_integral(model, relax.x, params.integrality_tol):
            cand = _incumbent_candidate(model, relax.x)
            if incumbent is None or cand[0] < incumbent[0]:
                incumbent = cand
            continue

        cand = _repair(engine, model, relax, node.fixings)
        if cand is not None and (incumbent is None or cand[0] < incumbent[0]):
            incumbent = cand

        free = [
            int(i)
            for i in model.free_binaries
            if int(i) not in node.fixings
        ]
        if not free:
            continue
        var = _select_branch_var(model, relax.x, free, params.integrality_tol)
        for val in (0, 1):
            child_fix = dict(node.fixings)
            child_fix[var] = val
            closed = propagate(model, child_fix)
            if closed is None or vx_chain_infeasible(model, closed):
                continue
            hint = (
                (relax.active_low, relax.active_upp)
                if relax.active_low is not None
                else None
            )
            child_relax = engine.solve(closed, warm=(relax.x, relax.y), active_hint=hint)
            node_count += 1
            if child_relax.status == INFEASIBLE:
                continue
            if child_relax.status == ITERATION_LIMIT and not np.isfinite(child_relax.objective):
                continue
            child = BbNode(closed, node.depth + 1, _safe_bound(child_relax), child_relax)
            if keep_nodes:
                kept.append(child)
            if params.verbose:
                inc_txt = f"{incumbent[0]:.6g}" if incumbent else "none"
                log.info(
                    "bnb node=%d depth=%d bound=%.6g incumbent=%s gap=%s",
                    node_count, child.depth, child.bound, inc_txt,
                    f"{gap_of(incumbent[0], best_bound):.3g}" if incumbent else "inf",
                )
            seq += 1
            heapq.heappush(heap, (child.bound, -child.depth, seq, child))

    if incumbent is None:
        if status == NODE_LIMIT:
            raise MiqpInfeasibleError("node limit reached before any incumbent was found")
        raise MiqpInfeasibleError("no integral feasible assignment exists")

    obj, x = incumbent
    if not heap and status == OPTIMAL_STATUS:
        best_bound = obj if best_bound > obj else best_bound
        gap = max(0.0, gap_of(obj, best_bound)) if best_bound < obj else 0.0
    else:
        gap = max(0.0, gap_of(obj, best_bound))
    return BnbResult(
        solution=x, objective=obj, gap=gap, node_count=node_count, status=status,
        nodes=kept,
    )


def enumerate_oracle(model: MiqpModel, limit: int = 20) -> tuple[np.ndarray, float]:
    """Exact optimum by enumerating consistent decision words and gate choices.

    Lane-transition and one-hot constraints prune inconsistent assignments;
    gates on non-target lanes are objective-neutral and canonicalized to 0.
    Shares only the plain QP solve with the search it oracles.
    """
    params = model.scenario.solver
    n_free = len(model.free_binaries)
    if n_free > limit:
        raise OracleLimitError(f"{n_free} free binaries exceed the oracle limit {limit}")
    engine = _engine(model, params)

    words: list[np.ndarray] = []

    def grow(prefix: list[int], sigma: int) -> None:
        if len(prefix) == model.T:
            words.append(np.array(prefix, dtype=int))
            return
        for a in (-1, 0, 1):
            if 1 <= sigma + a <= model.L:
                grow(prefix + [a], sigma + a)

    grow([], model.sigma0)

    best: tuple[float, np.ndarray] | None = None
    for word in words:
        base = _word_fixings(model, word)
        if base is None:
            continue
        merged = propagate(model, base)
        if merged is None:
            continue
        gate_vars: list[int] = []
        sigma_path = np.cumsum(np.concatenate([[model.sigma0], word]))
        for tau in range(model.T):
            k = int(sigma_path[tau + 1]) - 1
            for idx_xi in (model.idx_xi_lv, model.idx_xi_nv):
                i = int(idx_xi[tau, k])
                if i >= 0 and model.lb[i] != model.ub[i] and i not in merged:
                    gate_vars.append(i)
        for mask in range(1 << len(gate_vars)):
            fix = dict(merged)
            for bit, i in enumerate(gate_vars):
                fix[i] = (mask >> bit) & 1
            for i in model.free_binaries:
                fix.setdefault(int(i), 0)
            if vx_chain_infeasible(model, fix):
                continue
            sol = engine.solve(fix, max_iter=max(60000, 4 * params.qp_iter_limit))
            if sol.status == INFEASIBLE:
                continue
            if sol.status != OPTIMAL:
                if sol.max_infeasibility > 100 * params.feas_tol:
                    continue  # stuck on a (near-)infeasible leaf
                raise RuntimeError(
                    f"oracle leaf did not converge (status {sol.status}); "
                    "raise the iteration budget"
                )
            obj, x = _incumbent_candidate(model, sol.x)
            if best is None or obj < best[0] - 1e-12:
                best = (obj, x)
    if best is None:
        raise MiqpInfeasibleError("enumeration found no feasible assignment")
    return best[1], best[0]


def solve_decisions(
    scenario,
    params: SolverParams | None = None,
    warm_word: np.ndarray | None = None,
) -> tuple[DecisionSequence, BnbResult, MiqpModel]:
    """Build and solve the stage-one model, optionally re-freezing the soft
    costs once along the first solution (sequential convexification)."""
    params = params or scenario.solver
    model = build_decision_miqp(scenario)
    result = branch_and_bound(model, params, warm_word=warm_word)
    seq = extract_decisions(model, result.solution, integrality_tol=params.integrality_tol)
    if scenario.stage_one.refine_soft_costs:
        rollout = seq.states[: scenario.horizon.T, :2]
        coeffs = precompute_soft_coefficients(scenario, scenario.predictions(), rollout)
        model = build_decision_miqp(scenario, coeffs=coeffs)
        result = branch_and_bound(model, params, warm_word=seq.alpha)
        seq = extract_decisions(model, result.solution, integrality_tol=params.integrality_tol)
    return seq, result, model
