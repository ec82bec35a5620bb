import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laneopt.vehicle import (
    ControlInput,
    EgoState,
    ModelDomainError,
    VehicleParams,
    bicycle_step,
    bicycle_step_array,
    discrete_proxy_matrices,
    double_integrator_step,
    f_r,
    from_linear,
    linearize_bicycle,
    to_linear,
    wrap_angle,
)

P = VehicleParams()


def reference_step(x, u, h, ts):
    """Independent transcription of the discrete bicycle update."""
    px, py, th, v = x
    d, a = u
    adv = h + ts * v * math.cos(d) - math.sqrt(h * h - (ts * v * math.sin(d)) ** 2)
    return (
        px + adv * math.cos(th),
        py + adv * math.sin(th),
        th + math.asin(ts * v * math.sin(d) / h),
        v + ts * a,
    )


class TestFr:
    def test_zero_steer_collapses_to_arc(self):
        assert f_r(8.0, 0.0, 0.1, 2.7) == pytest.approx(0.8, abs=1e-12)

    def test_zero_speed(self):
        assert f_r(0.0, 0.3, 0.1, 2.7) == 0.0

    def test_formula_value(self):
        # frozen from a direct high-precision evaluation of the formula
        assert f_r(10.0, 0.1, 0.1, 2.7) == pytest.approx(0.9968504837912535, abs=1e-12)

    def test_domain_error(self):
        with pytest.raises(ModelDomainError):
            f_r(40.0, 1.2, 0.1, 2.7)


class TestBicycleStep:
    def test_straight_coast(self):
        x = EgoState(0.0, 1.0, 0.0, 8.0)
        nxt = bicycle_step(x, ControlInput(0.0, 0.0), P, 0.1)
        assert nxt.px == pytest.approx(0.8, abs=1e-12)
        assert nxt.py == 1.0
        assert nxt.theta == 0.0
        assert nxt.v == 8.0

    def test_acceleration_row(self):
        nxt = bicycle_step(EgoState(0, 0, 0, 8.0), ControlInput(0.0, 1.0), P, 0.1)
        assert nxt.v == pytest.approx(8.1, abs=1e-12)

    def test_full_update_matches_transcription(self):
        x = EgoState(1.0, -2.0, 0.2, 8.0)
        nxt = bicycle_step(x, ControlInput(0.05, 0.5), P, 0.1)
        assert nxt.px == pytest.approx(1.783363563953536, abs=1e-12)
        assert nxt.py == pytest.approx(-1.8412043441347785, abs=1e-12)
        assert nxt.theta == pytest.approx(0.21480918404605964, abs=1e-12)
        assert nxt.v == pytest.approx(8.05, abs=1e-12)

    @given(
        px=st.floats(-100, 100),
        py=st.floats(-20, 20),
        th=st.floats(-3.0, 3.0),
        v=st.floats(0.0, 20.0),
        d=st.floats(-0.5, 0.5),
        a=st.floats(-6.0, 3.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_reference_componentwise(self, px, py, th, v, d, a):
        got = bicycle_step_array(np.array([px, py, th, v]), np.array([d, a]), P, 0.1)
        ref = reference_step((px, py, th, v), (d, a), P.wheelbase, 0.1)
        for i in range(4):
            want = wrap_angle(ref[i]) if i == 2 else ref[i]
            assert got[i] == pytest.approx(want, abs=1e-12)

    @given(th=st.floats(-50.0, 50.0))
    @settings(max_examples=100, deadline=None)
    def test_heading_normalized(self, th):
        t = wrap_angle(th)
        assert -math.pi < t <= math.pi

    def test_zero_steer_conserves_heading(self):
        x = EgoState(0, 0, 0.7, 12.0)
        nxt = bicycle_step(x, ControlInput(0.0, 0.5), P, 0.1)
        assert nxt.theta == 0.7


class TestJacobians:
    def test_dpx_dv_at_zero_steer(self):
        theta = 0.4
        A, _ = linearize_bicycle(np.array([0, 0, theta, 9.0]), np.zeros(2), P, 0.1)
        assert A[0, 3] == pytest.approx(0.1 * math.cos(theta), abs=1e-12)

    def test_dv_da_is_ts(self):
        _, B = linearize_bicycle(np.array([0, 0, 0.3, 7.0]), np.array([0.2, -1.0]), P, 0.1)
        assert B[3, 1] == pytest.approx(0.1, abs=1e-15)

    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(7)
        ts, eps = 0.1, 1e-6
        for _ in range(100):
            x = np.array(
                [rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-1, 1), rng.uniform(1, 15)]
            )
            u = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-4, 2)])
            A, B = linearize_bicycle(x, u, P, ts)
            for j in range(4):
                dx = np.zeros(4)
                dx[j] = eps
                num = (
                    bicycle_step_array(x + dx, u, P, ts) - bicycle_step_array(x - dx, u, P, ts)
                ) / (2 * eps)
                assert np.allclose(A[:, j], num, rtol=1e-5, atol=1e-7)
            for j in range(2):
                du = np.zeros(2)
                du[j] = eps
                num = (
                    bicycle_step_array(x, u + du, P, ts) - bicycle_step_array(x, u - du, P, ts)
                ) / (2 * eps)
                assert np.allclose(B[:, j], num, rtol=1e-5, atol=1e-7)


class TestDoubleIntegrator:
    def test_zero_input_drift(self):
        nxt = double_integrator_step(np.array([1.0, 2.0, 3.0, -1.0]), np.zeros(2), 0.5)
        assert np.allclose(nxt, [2.5, 1.5, 3.0, -1.0])

    def test_velocity_row(self):
        nxt = double_integrator_step(np.array([0, 0, 8.0, 0.0]), np.array([1.0, 0.0]), 0.5)
        assert nxt[2] == pytest.approx(8.5, abs=1e-12)

    def test_position_gets_half_dt_squared_term(self):
        # exact ZOH integral: px gains 0.5*0.5^2*2 = 0.25 m beyond the drift
        nxt = double_integrator_step(np.array([0, 0, 0.0, 0.0]), np.array([2.0, 0.0]), 0.5)
        assert nxt[0] == pytest.approx(0.25, abs=1e-12)

    def test_decoupled_variant_matrices(self):
        A, B = discrete_proxy_matrices(0.5, zoh_positions=False)
        assert A[1, 1] == 0.0 and B[2, 0] == 1.0 and B[0, 0] == 0.0

    @given(
        x1=st.tuples(*[st.floats(-10, 10) for _ in range(4)]),
        x2=st.tuples(*[st.floats(-10, 10) for _ in range(4)]),
        u1=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
        u2=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    )
    @settings(max_examples=100, deadline=None)
    def test_affine(self, x1, x2, u1, u2):
        f = lambda x, u: double_integrator_step(np.array(x), np.array(u), 0.5)
        lhs = f(np.add(x1, x2), np.add(u1, u2)) - f(x2, u2)
        rhs = f(x1, u1) - f((0, 0, 0, 0), (0, 0))
        assert np.allclose(lhs, rhs, atol=1e-9)


class TestConversions:
    def test_straight(self):
        xb = to_linear(EgoState(0, 0, 0.0, 8.0))
        assert np.allclose(xb, [0, 0, 8.0, 0.0])

    def test_pythagoras(self):
        s = from_linear(np.array([0.0, 0.0, 3.0, 4.0]))
        assert s.v == pytest.approx(5.0, abs=1e-12)
        assert s.theta == pytest.approx(math.atan2(4, 3), abs=1e-12)

    def test_zero_velocity_heading_convention(self):
        assert from_linear(np.zeros(4)).theta == 0.0

    @given(
        px=st.floats(-50, 50),
        py=st.floats(-20, 20),
        th=st.floats(-3.1, 3.1),
        v=st.floats(0.01, 25.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, px, py, th, v):
        s = EgoState(px, py, wrap_angle(th), v)
        back = from_linear(to_linear(s))
        assert back.px == pytest.approx(s.px, abs=1e-12)
        assert back.py == pytest.approx(s.py, abs=1e-12)
        assert back.theta == pytest.approx(s.theta, abs=1e-9)
        assert back.v == pytest.approx(s.v, rel=1e-12)
