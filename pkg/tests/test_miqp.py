import dataclasses
import math

import numpy as np
import pytest

from laneopt.miqp import (
    MiqpBuildError,
    ExtractionError,
    build_decision_miqp,
    extract_decisions,
    nominal_rollout,
    precompute_soft_coefficients,
    stage_one_cost,
    upsample_references,
)
from laneopt.params import DecisionWeights
from laneopt.scenario import Horizon, Lane, ScenarioConfig, SvState
from laneopt.vehicle import EgoState

from conftest import toy_scenarios


def single_lane_scenario(svs=()):
    return ScenarioConfig(
        road=(Lane(1, 0.0, 4.0, 15.0),),
        ev_init=EgoState(0.0, 0.0, 0.0, 8.0),
        svs=tuple(svs),
        horizon=Horizon(T=5, dt_decision=0.5, N=25, dt_traj=0.1),
    )


class TestSoftCoefficients:
    def test_absent_vehicle_zero(self, scenario1):
        co = precompute_soft_coefficients(scenario1, scenario1.predictions())
        # at the start nobody is behind the EV, so all rear fees vanish
        assert np.all(co.kappa_nv[:, 0] == 0.0)
        assert not co.has_nv[:, 0].any()
        # the slow right-lane vehicle falls behind the nominal rollout late
        # in the horizon and flips from lead to rear there
        assert co.has_nv[2, -1]
        assert not co.has_lv[2, -1]
        # lanes with faster traffic never grow a rear vehicle
        assert not co.has_nv[0].any() and not co.has_nv[1].any()

    def test_zero_clearance_saturates(self):
        sc = single_lane_scenario(
            [SvState(id=1, px=2.0, py=0.0, vx=8.0, vy=0.0, length=4.5, width=2.0)]
        )
        co = precompute_soft_coefficients(sc, sc.predictions())
        w = sc.decision_weights
        # gap 2 m is below the vehicle length: clamped at zero clearance
        assert co.kappa_lv[0, 0] == pytest.approx(w.dist_lv / w.epsilon**2)

    def test_scenario2_lane2_tau0(self, scenario2):
        co = precompute_soft_coefficients(scenario2, scenario2.predictions())
        w = scenario2.decision_weights
        ln = scenario2.vehicle.length
        # lead 15 m straight ahead on the same lane
        dd = math.hypot(15.0, 0.0) - ln
        assert co.kappa_lv[1, 0] == pytest.approx(w.dist_lv / (dd * dd + w.epsilon**2), rel=1e-12)

    def test_reference_velocity_table(self, scenario1):
        co = precompute_soft_coefficients(scenario1, scenario1.predictions())
        assert np.all(co.v_ref[1] == 12.0)  # fast lead on the own lane
        assert np.all(co.v_ref[0] == 10.0)

    def test_nominal_rollout_constant_velocity(self, scenario1):
        roll = nominal_rollout(scenario1)
        assert roll[0, 0] == 0.0
        assert roll[3, 0] == pytest.approx(3 * 0.5 * 8.0)
        assert np.all(roll[:, 1] == 4.0)


class TestBuild:
    def test_single_lane_fixes_changes(self):
        from laneopt.bnb import propagate

        model = build_decision_miqp(single_lane_scenario())
        for tau in range(model.T):
            assert model.ub[model.idx_b[tau, 0]] == 0.0
            assert model.ub[model.idx_b[tau, 2]] == 0.0
        # the remaining keep-binaries are forced by the one-hot structure
        closed = propagate(model, {})
        assert all(int(i) in closed for i in model.free_binaries)

    def test_binary_count_formula(self, scenario1):
        model = build_decision_miqp(scenario1)
        T, L = scenario1.horizon.T, len(scenario1.road)
        assert model.binary_count == T * (3 + L + 2 * L)

    def test_hessian_psd_all_scenarios(self, scenario1, scenario2, scenario3, scenario4):
        for sc in (scenario1, scenario2, scenario3, scenario4):
            model = build_decision_miqp(sc)
            assert model.check_psd() >= -1e-8

    def test_outside_road_rejected(self, scenario1):
        bad = dataclasses.replace(scenario1, ev_init=EgoState(0.0, 30.0, 0.0, 8.0))
        with pytest.raises(MiqpBuildError, match="initial lane"):
            build_decision_miqp(bad)

    def test_dump_round_trips_fields(self, tmp_path, scenario1):
        model = build_decision_miqp(scenario1)
        path = tmp_path / "model.txt"
        model.dump(path)
        text = path.read_text().splitlines()
        assert text[0].startswith("# laneopt miqp dump")
        assert text[1] == f"vars {model.n}"
        assert sum(1 for ln in text if ln.startswith("var ")) == model.n
        assert sum(1 for ln in text if ln.startswith("row ")) == model.A.shape[0]


class TestExtract:
    def solved(self, model):
        from laneopt.bnb import branch_and_bound

        res = branch_and_bound(model)
        return res, extract_decisions(model, res.solution)

    def test_occupancy_matches_cumsum_and_speed_cap(self):
        for sc, model in toy_scenarios(6):
            res, seq = self.solved(model)
            assert seq.occupied[0] == model.sigma0
            assert np.all(np.diff(seq.occupied) == seq.alpha)
            for tau in range(model.T):
                lane = sc.road[seq.ref_lane[tau] - 1]
                assert seq.v_ref[tau] <= lane.speed_limit + 1e-12

    def test_objective_matches_independent_recompute(self):
        for sc, model in toy_scenarios(6):
            res, seq = self.solved(model)
            recomputed = stage_one_cost(model, res.solution)
            assert res.objective == pytest.approx(recomputed, rel=1e-6, abs=1e-8)

    def test_fractional_rejected(self, scenario1):
        model = build_decision_miqp(scenario1)
        x = np.full(model.n, 0.5)
        with pytest.raises(ExtractionError):
            extract_decisions(model, x)

    def test_upsample_zero_order_lane_linear_speed(self, scenario1):
        model = build_decision_miqp(scenario1)
        from laneopt.bnb import branch_and_bound

        res = branch_and_bound(model)
        seq = extract_decisions(model, res.solution)
        prof = upsample_references(seq, scenario1)
        hz = scenario1.horizon
        assert len(prof.t) == hz.N + 1
        # lane id held constant within each decision interval
        R = hz.steps_per_decision
        for tau in range(hz.T):
            assert np.all(prof.lane_id[tau * R : (tau + 1) * R] == seq.ref_lane[tau])
        # speed exactly interpolates the decision-grid knots
        for tau in range(hz.T):
            assert prof.vx_ref[tau * R] == pytest.approx(seq.v_ref[tau], abs=1e-12)


class TestInvariants:
    def test_one_hot_rows_hold_at_optimum(self):
        for sc, model in toy_scenarios(4):
            from laneopt.bnb import branch_and_bound

            res = branch_and_bound(model)
            b = np.round(res.solution[model.idx_b])
            z = np.round(res.solution[model.idx_z])
            assert np.all(b.sum(axis=1) == 1)
            assert np.all(z.sum(axis=1) == 1)

    def test_gate_sign_consistency(self):
        # with the target lane active, the gate equals the sign comparison
        for sc, model in toy_scenarios(6):
            from laneopt.bnb import branch_and_bound

            res = branch_and_bound(model)
            seq = extract_decisions(model, res.solution)
            eps = sc.decision_weights.epsilon_strict
            for tau in range(model.T):
                k = seq.ref_lane[tau] - 1
                vx = res.solution[model.idx_state[tau, 2]]
                if model.coeffs.has_lv[k, tau]:
                    xi = round(float(res.solution[model.idx_xi_lv[tau, k]]))
                    d = model.coeffs.v_lv[k, tau] - vx
                    if d <= -eps:
                        assert xi == 1
                    elif d >= 0:
                        assert xi == 0
                if model.coeffs.has_nv[k, tau]:
                    xi = round(float(res.solution[model.idx_xi_nv[tau, k]]))
                    d = model.coeffs.v_nv[k, tau] - vx
                    if d >= eps:
                        assert xi == 1
                    elif d <= 0:
                        assert xi == 0

    def test_gated_penalty_tightness(self):
        # active deviation variables equal their gated quadratic at optima
        for sc, model in toy_scenarios(6, start_seed=40):
            from laneopt.bnb import branch_and_bound

            res = branch_and_bound(model)
            seq = extract_decisions(model, res.solution)
            x = res.solution
            names = model.names
            for i, name in enumerate(names):
                if not name.startswith("eLV") and not name.startswith("eNV"):
                    continue
                tau = int(name[3:].split("_")[0])
                k = int(name.split("_l")[1]) - 1
                target = seq.ref_lane[tau] - 1
                vx = x[model.idx_state[tau, 2]]
                e = x[i]
                if name.startswith("eLV"):
                    gate = (
                        k == target
                        and round(float(x[model.idx_xi_lv[tau, k]])) == 1
                    )
                    d = model.coeffs.v_lv[k, tau] - vx
                else:
                    gate = (
                        k == target
                        and round(float(x[model.idx_xi_nv[tau, k]])) == 1
                        and seq.alpha[tau] != 0
                    )
                    d = model.coeffs.v_nv[k, tau] - vx
                want = abs(d) if gate else 0.0
                assert e == pytest.approx(want, abs=5e-5)
