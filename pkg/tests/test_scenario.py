import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laneopt.scenario import (
    Horizon,
    Lane,
    ScenarioError,
    SvState,
    classify_svs,
    lane_of,
    load_scenario,
    predict_sv,
    reference_velocity,
    scenario_from_dict,
)
from laneopt.vehicle import EgoState

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

ROAD = (
    Lane(1, 8.0, 4.0, 16.6),
    Lane(2, 4.0, 4.0, 16.6),
    Lane(3, 0.0, 4.0, 16.6),
)


def make_sv(i, px, py, vx, vy=0.0):
    return SvState(id=i, px=px, py=py, vx=vx, vy=vy, length=4.5, width=2.0)


class TestLoad:
    def test_scenario1_table_values(self):
        cfg = load_scenario(SCENARIOS / "s1.json")
        assert cfg.ev_init == EgoState(0.0, 4.0, 0.0, 8.0)
        sv2 = next(sv for sv in cfg.svs if sv.id == 2)
        assert (sv2.px, sv2.py, sv2.vx) == (15.0, 4.0, 12.0)
        assert cfg.horizon.T == 10 and cfg.horizon.N == 50
        assert cfg.horizon.steps_per_decision == 5

    def test_empty_sv_list_is_valid(self):
        doc = json.loads((SCENARIOS / "s1.json").read_text())
        doc["svs"] = []
        cfg = scenario_from_dict(doc)
        assert cfg.svs == ()

    def test_horizon_mismatch_rejected(self):
        doc = json.loads((SCENARIOS / "s1.json").read_text())
        doc["horizon"]["N"] = 40
        with pytest.raises(ScenarioError, match="dt_traj"):
            scenario_from_dict(doc)

    def test_missing_field_named(self):
        doc = json.loads((SCENARIOS / "s1.json").read_text())
        del doc["ev"]["v"]
        with pytest.raises(ScenarioError, match="'v'"):
            scenario_from_dict(doc)

    def test_nonmonotone_road_rejected(self):
        doc = json.loads((SCENARIOS / "s1.json").read_text())
        doc["road"][1]["center_y"] = 9.0
        with pytest.raises(ScenarioError, match="monotone"):
            scenario_from_dict(doc)

    def test_parse_failure(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ScenarioError, match="invalid JSON"):
            load_scenario(bad)

    def test_all_shipped_scenarios_load(self):
        for name in ("s1", "s2", "s3", "s4"):
            cfg = load_scenario(SCENARIOS / f"{name}.json")
            assert cfg.ev_lane().id == 2


class TestPredict:
    def test_hand_value(self):
        pred = predict_sv(make_sv(7, 15.0, 4.0, 4.0), 11, 0.5)
        assert pred.states[10].px == pytest.approx(35.0, abs=1e-12)

    def test_stationary(self):
        pred = predict_sv(make_sv(1, 5.0, 0.0, 0.0), 10, 0.5)
        assert all(s.px == 5.0 and s.py == 0.0 for s in pred.states)

    def test_scenario2_sv2_at_tau2(self):
        pred = predict_sv(make_sv(2, 15.0, 4.0, 4.0), 10, 0.5)
        assert (pred.states[2].px, pred.states[2].py) == (19.0, 4.0)

    @given(
        px=st.floats(-50, 50), vx=st.floats(-10, 10),
        tau=st.integers(0, 4), dt=st.floats(0.1, 1.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_linear_in_tau(self, px, vx, tau, dt):
        pred = predict_sv(make_sv(1, px, 0.0, vx), 10, dt)
        a, b, c = pred.states[0], pred.states[tau], pred.states[2 * tau]
        assert (c.px - b.px) == pytest.approx(b.px - a.px, abs=1e-9)


class TestClassify:
    EV = EgoState(0.0, 4.0, 0.0, 8.0)

    def scenario3_predictions(self):
        svs = [
            make_sv(1, 8.0, 8.0, 6.0),
            make_sv(2, 15.0, 4.0, 4.0),
            make_sv(3, 12.0, 0.0, 15.0),
            make_sv(4, -3.0, 8.0, 10.0),
            make_sv(5, -5.0, 0.0, 6.0),
        ]
        return [predict_sv(sv, 10, 0.5) for sv in svs]

    def test_scenario3_lane1_roles(self):
        asg = classify_svs(self.EV, self.scenario3_predictions(), ROAD, 0)
        assert asg.lv[1].id == 1
        assert asg.nv[1].id == 4

    def test_no_svs(self):
        asg = classify_svs(self.EV, [], ROAD, 0)
        assert asg.lv == {} and asg.nv == {}

    def test_nearest_ahead_wins(self):
        preds = [predict_sv(make_sv(1, 20.0, 4.0, 5.0), 5, 0.5),
                 predict_sv(make_sv(2, 10.0, 4.0, 5.0), 5, 0.5)]
        asg = classify_svs(self.EV, preds, ROAD, 0)
        assert asg.lv[2].id == 2

    def test_outside_road_rejected(self):
        preds = [predict_sv(make_sv(1, 5.0, 30.0, 5.0), 5, 0.5)]
        with pytest.raises(ScenarioError, match="outside"):
            classify_svs(self.EV, preds, ROAD, 0)

    def test_partition_exclusive(self):
        # no SV may be both LV and NV of the same lane at any step
        preds = self.scenario3_predictions()
        for tau in range(10):
            asg = classify_svs(self.EV, preds, ROAD, tau)
            for lane_id, lv in asg.lv.items():
                nv = asg.nv.get(lane_id)
                assert nv is None or nv.id != lv.id

    def test_lane_binning_tie_prefers_lower_id(self):
        assert lane_of(6.0, ROAD).id == 1

    def test_passed_sv_flips_to_nv(self):
        # EV ahead of a slow SV mid-horizon: it must appear as NV, not LV
        preds = [predict_sv(make_sv(1, 2.0, 4.0, 0.0), 10, 0.5)]
        asg = classify_svs(EgoState(5.0, 4.0, 0.0, 8.0), preds, ROAD, 0)
        assert 2 not in asg.lv and asg.nv[2].id == 1


class TestReferenceVelocity:
    def test_min_of_limit_and_lv(self):
        asg = classify_svs(EgoState(0, 4, 0, 8), [predict_sv(make_sv(1, 10, 4, 12.0), 5, 0.5)], ROAD, 0)
        assert reference_velocity(ROAD[1], asg) == 12.0

    def test_no_lv_gives_limit(self):
        asg = classify_svs(EgoState(0, 4, 0, 8), [], ROAD, 0)
        assert reference_velocity(ROAD[1], asg) == 16.6

    @given(vlv=st.floats(0.5, 40.0))
    @settings(max_examples=50, deadline=None)
    def test_never_exceeds_limit(self, vlv):
        asg = classify_svs(
            EgoState(0, 4, 0, 8), [predict_sv(make_sv(1, 10, 4, vlv), 5, 0.5)], ROAD, 0
        )
        assert reference_velocity(ROAD[1], asg) <= ROAD[1].speed_limit


class TestHorizon:
    def test_coupling_enforced(self):
        with pytest.raises(ScenarioError):
            Horizon(T=10, dt_decision=0.5, N=49, dt_traj=0.1)

    def test_valid(self):
        hz = Horizon(T=10, dt_decision=0.5, N=50, dt_traj=0.1)
        assert hz.steps_per_decision == 5
