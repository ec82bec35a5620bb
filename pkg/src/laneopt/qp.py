"""Convex QP solver by operator splitting.

Solves  minimize 0.5 x'Px + q'x + c  subject to  l <= Ax <= u  with P symmetric
positive semidefinite. The iteration alternates an equality-constrained
quadratic solve (one cached sparse KKT factorization, reused across calls with
changed bounds) with projection onto the box and a scaled dual update. A
polish step solves the active-set KKT system exactly so reported optima carry
KKT residuals at solver precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"


@dataclass
class QpSolution:
    """Primal/dual result with feasibility and iteration accounting."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    objective: float
    max_infeasibility: float
    iterations: int
    status: str
    polished: bool = False
    r_prim: float = 0.0
    r_dual: float = 0.0
    active_low: np.ndarray | None = None
    active_upp: np.ndarray | None = None

    def kkt_residuals(self, P, q, A, l, u) -> tuple[float, float, float]:
        """(stationarity, primal, complementarity) residuals, unscaled."""
        Ax = A @ self.x
        r_stat = float(np.max(np.abs(P @ self.x + q + A.T @ self.y))) if len(q) else 0.0
        r_prim = float(np.max(np.maximum(Ax - u, 0.0) + np.maximum(l - Ax, 0.0))) if len(l) else 0.0
        r_comp = 0.0
        for i in range(len(l)):
            yi = self.y[i]
            if yi > 0.0:
                r_comp = max(r_comp, yi * abs(u[i] - Ax[i]))
            elif yi < 0.0:
                r_comp = max(r_comp, -yi * abs(Ax[i] - l[i]))
        return r_stat, r_prim, r_comp


class BoxQp:
    """Operator-splitting solver with a bound-independent cached factorization."""

    def __init__(
        self,
        P,
        q: np.ndarray,
        A,
        l: np.ndarray,
        u: np.ndarray,
        constant: float = 0.0,
        sigma: float = 1e-6,
        alpha: float = 1.6,
        rho: float = 1.0,
        scaling_iters: int = 10,
    ):
        self.n = len(q)
        self.m = len(l)
        self.P = sp.csc_matrix(P)
        self.q = np.asarray(q, dtype=float)
        self.A = sp.csc_matrix(A) if self.m else sp.csc_matrix((0, self.n))
        self.l = np.asarray(l, dtype=float)
        self.u = np.asarray(u, dtype=float)
        self.constant = float(constant)
        self.sigma = sigma
        self.alpha = alpha

        self._equilibrate(scaling_iters)

        # equality rows get a stiffer penalty; bound changes between solves
        # keep the classification from construction so the factorization holds
        self._eq_rows = (self._u_s - self._l_s) <= 1e-12
        self.rho_val = rho
        self._refactor()
        self._index_dual_structure()

    def _index_dual_structure(self) -> None:
        """Map variables to their single-variable rows and covering equality
        rows, used to re-balance non-unique duals on dependent active sets."""
        self._var_bound_row: dict[int, tuple[int, float]] = {}
        self._eq_covers: dict[int, list[int]] = {}
        self._eq_row_terms: dict[int, list[tuple[int, float]]] = {}
        csr = self.A.tocsr()
        base_eq = (self.u - self.l) <= 1e-12
        for r in range(self.m):
            s, e = csr.indptr[r], csr.indptr[r + 1]
            cols = csr.indices[s:e]
            vals = csr.data[s:e]
            if len(cols) == 1 and abs(abs(float(vals[0])) - 1.0) < 1e-12:
                self._var_bound_row.setdefault(int(cols[0]), (r, float(vals[0])))
            elif base_eq[r] and len(cols) > 1:
                terms = [(int(c), float(v)) for c, v in zip(cols, vals)]
                self._eq_row_terms[r] = terms
                for c, _ in terms:
                    self._eq_covers.setdefault(int(c), []).append(r)

    def _equilibrate(self, iters: int) -> None:
        """Ruiz equilibration of [P A'; A 0] plus a scalar cost normalization."""
        n, m = self.n, self.m
        E = np.ones(n)
        D = np.ones(m)
        P, A = self.P.copy(), self.A.copy()
        for _ in range(iters):
            pc = np.abs(P).max(axis=0).toarray().ravel() if P.nnz else np.zeros(n)
            ac = np.abs(A).max(axis=0).toarray().ravel() if A.nnz else np.zeros(n)
            ce = 1.0 / np.sqrt(np.maximum(np.maximum(pc, ac), 1e-8))
            ar = np.abs(A).max(axis=1).toarray().ravel() if A.nnz else np.zeros(m)
            cd = 1.0 / np.sqrt(np.maximum(ar, 1e-8))
            Se = sp.diags(ce)
            P = Se @ P @ Se
            A = sp.diags(cd) @ A @ Se
            E *= ce
            D *= cd
        q_s = E * self.q
        nrm = max(
            float(np.abs(P).max(axis=0).toarray().max()) if P.nnz else 0.0,
            float(np.max(np.abs(q_s))) if n else 0.0,
        )
        self.cost_scale = 1.0 / max(1.0, nrm)
        self._P_s = sp.csc_matrix(P * self.cost_scale)
        self._A_s = sp.csc_matrix(A)
        self._q_s = q_s * self.cost_scale
        self._E = E
        self._D = D
        self._l_s = D * self.l
        self._u_s = D * self.u

    def _refactor(self) -> None:
        self.rho_vec = np.where(self._eq_rows, 1e3 * self.rho_val, self.rho_val)
        kkt = sp.bmat(
            [
                [self._P_s + self.sigma * sp.eye(self.n), self._A_s.T],
                [self._A_s, -sp.diags(1.0 / self.rho_vec)],
            ],
            format="csc",
        ) if self.m else sp.csc_matrix(self._P_s + self.sigma * sp.eye(self.n))
        self._kkt = spla.splu(kkt)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)

    def solve(
        self,
        l: np.ndarray | None = None,
        u: np.ndarray | None = None,
        warm: tuple[np.ndarray, np.ndarray] | None = None,
        max_iter: int = 20000,
        feas_tol: float = 1e-6,
        check_every: int = 25,
        active_hint: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> QpSolution:
        """Solve with (optionally) overridden bounds, reusing the factorization."""
        n, m = self.n, self.m
        l = self.l if l is None else np.asarray(l, dtype=float)
        u = self.u if u is None else np.asarray(u, dtype=float)
        if m and np.any(l > u + 1e-12):
            return QpSolution(
                np.zeros(n), np.zeros(m), np.zeros(m),
                math_inf(), math_inf(), 0, INFEASIBLE,
            )
        if active_hint is not None and m:
            hinted = self.polish_from_hint(active_hint[0], active_hint[1], l, u, feas_tol)
            if hinted is not None:
                return hinted
        ls, us = self._D * l, self._D * u

        if warm is not None:
            x = warm[0] / self._E
            y = self.cost_scale * warm[1] / self._D if m else np.zeros(0)
        else:
            x = np.zeros(n)
            y = np.zeros(m)
        z = np.clip(self._A_s @ x, ls, us) if m else np.zeros(0)

        if m == 0:
            xs = self._kkt.solve(-self._q_s)
            for _ in range(3):  # strip the sigma regularization by refinement
                xs = xs + self._kkt.solve(-self._q_s - self._P_s @ xs)
            sol = QpSolution(self._E * xs, y, z, 0.0, 0.0, 1, OPTIMAL, polished=True)
            sol.objective = self.objective(sol.x)
            return sol

        alpha = self.alpha
        y_prev_check = y.copy()
        x_prev_check = x.copy()
        rhs = np.empty(n + m)
        it = 0
        adaptations = 0
        last_polish = -10**9
        polish_spacing = 200
        polish_attempts = 0
        while it < max_iter:
            rho = self.rho_vec
            inner = min(check_every, max_iter - it)
            for _ in range(inner):
                rhs[:n] = self.sigma * x - self._q_s
                rhs[n:] = z - y / rho
                sol = self._kkt.solve(rhs)
                x_t = sol[:n]
                z_t = z + (sol[n:] - y) / rho
                x = alpha * x_t + (1.0 - alpha) * x
                z_r = alpha * z_t + (1.0 - alpha) * z
                z = np.clip(z_r + y / rho, ls, us)
                y = y + rho * (z_r - z)
            it += inner

            res = self._unscaled_residuals(x, y, z)
            if adaptations < 8 and res.r_prim > 0.0 and res.r_dual > 0.0:
                scale = np.sqrt(res.r_prim / res.r_dual)
                new_rho = float(np.clip(self.rho_val * scale, 1e-6, 1e6))
                if new_rho > 5.0 * self.rho_val or new_rho < self.rho_val / 5.0:
                    self.rho_val = new_rho
                    self._refactor()
                    adaptations += 1
            if res.r_prim <= feas_tol and res.r_dual <= feas_tol:
                polished = self._polish(x, y, l, u, feas_tol)
                if polished is not None:
                    polished.iterations = it
                    return polished
                xs, ys, zs = self._unscale(x, y, z)
                return QpSolution(
                    xs, ys, zs, self.objective(xs), res.r_prim, it, OPTIMAL,
                    r_prim=res.r_prim, r_dual=res.r_dual,
                )
            if self._primal_infeasible(y - y_prev_check, ls, us):
                xs, ys, zs = self._unscale(x, y, z)
                return QpSolution(
                    xs, ys, zs, math_inf(), res.r_prim, it, INFEASIBLE
                )
            # a tight primal with a lagging dual is the polish sweet spot;
            # failures back off exponentially to bound their total cost
            ripe = res.r_prim <= 10 * feas_tol and res.r_dual <= 1e-3
            if ripe and polish_attempts < 6 and it - last_polish >= polish_spacing:
                last_polish = it
                polish_attempts += 1
                polished = self._polish(x, y, l, u, feas_tol)
                if polished is not None:
                    polished.iterations = it
                    return polished
                polish_spacing *= 2
            y_prev_check = y.copy()
            x_prev_check = x.copy()

        polished = self._polish(x, y, l, u, feas_tol)
        if polished is not None:
            polished.iterations = it
            return polished
        xs, ys, zs = self._unscale(x, y, z)
        res = self._unscaled_residuals(x, y, z)
        return QpSolution(
            xs, ys, zs, self.objective(xs), res.r_prim, it, ITERATION_LIMIT,
            r_prim=res.r_prim, r_dual=res.r_dual,
        )

    def _unscale(self, x, y, z):
        return self._E * x, self._D * y / self.cost_scale, z / self._D

    class _Residuals:
        __slots__ = ("r_prim", "r_dual")

        def __init__(self, r_prim, r_dual):
            self.r_prim = r_prim
            self.r_dual = r_dual

    def _unscaled_residuals(self, x, y, z):
        xs, ys, zs = self._unscale(x, y, z)
        Ax = self.A @ xs
        r_prim = float(np.max(np.abs(Ax - zs))) if self.m else 0.0
        r_dual = float(np.max(np.abs(self.P @ xs + self.q + self.A.T @ ys)))
        scale_p = max(1.0, float(np.max(np.abs(Ax))) if self.m else 0.0)
        scale_d = max(1.0, float(np.max(np.abs(self.P @ xs))), float(np.max(np.abs(self.q))) if self.n else 0.0)
        return self._Residuals(r_prim / scale_p, r_dual / scale_d)

    def _primal_infeasible(self, dy: np.ndarray, ls, us) -> bool:
        nrm = float(np.max(np.abs(dy))) if self.m else 0.0
        if nrm <= 1e-12:
            return False
        dyn = dy / nrm
        if float(np.max(np.abs(self._A_s.T @ dyn))) > 1e-7:
            return False
        pos = dyn > 1e-10
        neg = dyn < -1e-10
        if np.any(pos & np.isinf(us)) or np.any(neg & np.isinf(ls)):
            return False  # an unbounded side absorbs the ray; no certificate
        gap = float(us[pos] @ dyn[pos] + ls[neg] @ dyn[neg])
        return gap < -1e-7

    def _solve_active(self, low: np.ndarray, upp: np.ndarray, l: np.ndarray, u: np.ndarray):
        """Equality solve with the given active sides; returns (x, y, Ax)."""
        active = low | upp
        b_act = np.where(low, l, u)[active]
        A_act = self.A[active]
        k = int(np.sum(active))
        reg = 1e-8
        kkt = sp.bmat(
            [[self.P + reg * sp.eye(self.n), A_act.T], [A_act, -reg * sp.eye(k) if k else None]],
            format="csc",
        )
        rhs = np.concatenate([-self.q, b_act])
        try:
            lu = spla.splu(kkt)
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        for _ in range(2):  # refinement strips the regularization
            r_top = -self.q - (self.P @ sol[: self.n] + A_act.T @ sol[self.n:])
            r_bot = b_act - A_act @ sol[: self.n]
            sol = sol + lu.solve(np.concatenate([r_top, r_bot]))
        xp = sol[: self.n]
        yp = np.zeros(self.m)
        yp[active] = sol[self.n:]
        return xp, yp, self.A @ xp

    def _signed_duals(self, low, upp, eq, xp, y_kkt):
        """Validate the pinned-KKT multipliers, or produce a release hint.

        Duals are non-unique on dependent active rows; tiny wrong-signed
        entries are zeroed when stationarity allows, one-hot style dependence
        is absorbed into the covering equality row, and remaining large
        wrong-signed rows are handed back for release from the active set.
        Returns (y, None) on success or (None, release_mask | None).
        """
        y = y_kkt.copy()
        y_scale = max(1.0, float(np.max(np.abs(y))))
        sign_tol = 1e-9 * y_scale
        wrong = (low & ~eq & (y > sign_tol)) | (upp & ~eq & (y < -sign_tol))
        if not wrong.any():
            return y, None
        # absorb sign defects of variable-bound rows into a covering equality
        # row (a one-hot sum shares its dual with its members' bound rows)
        active = low | upp
        for i in np.where(wrong)[0]:
            row_info = None
            # wrong row must itself be a single-variable row
            for col, (r, b) in self._var_bound_row.items():
                if r == i:
                    row_info = (col, b)
                    break
            if row_info is None:
                continue
            col, b = row_info
            for r_eq in self._eq_covers.get(col, []):
                if not active[r_eq]:
                    continue
                terms = self._eq_row_terms[r_eq]
                c_col = next(v for c, v in terms if c == col)
                delta = y[i] * b / c_col
                updates: list[tuple[int, float]] = []
                ok = True
                for c_j, v_j in terms:
                    if c_j == col:
                        continue
                    br = self._var_bound_row.get(c_j)
                    if br is None or not active[br[0]]:
                        ok = False
                        break
                    j, bj = br
                    cand = y[j] - delta * v_j / bj
                    if not eq[j] and (
                        (low[j] and cand > sign_tol) or (upp[j] and cand < -sign_tol)
                    ):
                        ok = False
                        break
                    updates.append((j, cand))
                if not ok:
                    continue
                for j, cand in updates:
                    y[j] = cand
                y[r_eq] += delta
                y[i] = 0.0
                break
        wrong = (low & ~eq & (y > sign_tol)) | (upp & ~eq & (y < -sign_tol))
        if not wrong.any():
            return y, None
        # zero the small offenders if stationarity survives it
        small = wrong & (np.abs(y) <= 1e-6 * y_scale)
        if small.any():
            y2 = y.copy()
            y2[small] = 0.0
            stat = float(np.max(np.abs(self.P @ xp + self.q + self.A.T @ y2)))
            if stat <= 1e-6 * max(1.0, float(np.max(np.abs(self.q)))):
                wrong2 = (low & ~eq & (y2 > sign_tol)) | (upp & ~eq & (y2 < -sign_tol))
                if not wrong2.any():
                    return y2, None
                y = y2
                wrong = wrong2
        big = wrong & (np.abs(y) > 1e-6 * y_scale)
        if big.any():
            return None, big
        return None, None

    def _polish(self, x_s, y_s, l, u, feas_tol) -> QpSolution | None:
        """Active-set polish seeded from the splitting iterate: pins equality
        rows plus rows with tight slack or strong duals."""
        if self.m == 0:
            return None
        x, y, _ = self._unscale(x_s, y_s, np.zeros(self.m))
        Ax = self.A @ x
        eq = (u - l) <= 1e-12
        y_scale = max(1e-12, float(np.max(np.abs(y))))
        tol_row = 1e-6 * (1.0 + np.minimum(np.abs(l), np.abs(u)))
        slack_l = np.where(np.isfinite(l), Ax - l, np.inf)
        slack_u = np.where(np.isfinite(u), u - Ax, np.inf)
        low = (~eq) & ((slack_l < tol_row) | ((y < -1e-3 * y_scale) & (slack_l < slack_u))) | eq
        upp = (~low) & ((slack_u < tol_row) | ((y > 1e-3 * y_scale) & (slack_u <= slack_l)))
        return self._polish_from(low, upp, l, u, feas_tol)

    def polish_from_hint(self, low, upp, l, u, feas_tol) -> QpSolution | None:
        """Exact solve seeded by a known-good active set (e.g. a parent node's).

        Equality rows of the current bounds are forced active; the refinement
        loop then verifies and repairs the set.
        """
        eq = (u - l) <= 1e-12
        low = (np.asarray(low, dtype=bool) | eq).copy()
        upp = (np.asarray(upp, dtype=bool) & ~low).copy()
        return self._polish_from(low, upp, l, u, feas_tol)

    def _polish_from(self, low, upp, l, u, feas_tol) -> QpSolution | None:
        """Refine an active-set guess to a verified KKT point, or fail.

        Grows the set on violations, releases rows the signed-dual recovery
        rejects, and verifies stationarity, feasibility and signs exactly.
        """
        eq = (u - l) <= 1e-12
        breakages = 0
        for _ in range(8):
            got = self._solve_active(low, upp, l, u)
            if got is None:
                return None
            xp, y_kkt, Axp = got
            pin = np.where(low, l, u)
            broken = (low | upp) & ~eq & (np.abs(Axp - pin) > 10 * feas_tol)
            if broken.any():
                # over-constrained pin set: release the non-equality conflicts;
                # repeated breakage means the iterate is not ripe for polishing
                breakages += 1
                if breakages > 2:
                    return None
                low &= ~broken
                upp &= ~broken
                continue
            viol_low = (l - Axp > feas_tol) & ~low
            viol_upp = (Axp - u > feas_tol) & ~upp
            if viol_low.any() or viol_upp.any():
                low |= viol_low & ~upp
                upp |= viol_upp & ~low
                continue
            viol = float(np.max(np.maximum(Axp - u, 0.0) + np.maximum(l - Axp, 0.0)))
            if viol > feas_tol:
                return None
            yp, release = self._signed_duals(low, upp, eq, xp, y_kkt)
            if yp is None:
                if release is None or not release.any():
                    return None
                low &= ~release
                upp &= ~release
                continue
            # unconditional verification: stationarity, signs, complementarity
            stat = float(np.max(np.abs(self.P @ xp + self.q + self.A.T @ yp)))
            if stat > 1e-6 * max(1.0, float(np.max(np.abs(self.q)))):
                return None
            inactive = ~(low | upp)
            if inactive.any() and float(np.max(np.abs(yp[inactive]), initial=0.0)) > 1e-9:
                return None
            s_tol = 1e-9 * max(1.0, float(np.max(np.abs(yp))))
            if np.any(yp[low & ~eq] > s_tol) or np.any(yp[upp & ~eq] < -s_tol):
                return None
            return QpSolution(
                xp, yp, Axp, self.objective(xp), viol, 0, OPTIMAL, polished=True,
                active_low=low.copy(), active_upp=upp.copy(),
            )
        return None


def math_inf() -> float:
    return float("inf")


def solve_box_qp(P, q, A, l, u, constant: float = 0.0, **kwargs) -> QpSolution:
    """One-shot convenience wrapper around BoxQp."""
    solver_kwargs = {k: kwargs.pop(k) for k in ("sigma", "alpha", "rho") if k in kwargs}
    return BoxQp(P, q, A, l, u, constant, **solver_kwargs).solve(**kwargs)
