"""
Tests for the reflected Euler-Maruyama scheme
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.errors import NonFiniteValueError, ValidationError
from src.sde import ReflectedState, integrate_path, reflected_euler_step


@st.composite
def step_inputs(draw):
    """Random state, coefficients and increment for B orientations"""
    n_orient = draw(st.integers(1, 4))
    floats = st.floats(-3.0, 3.0, allow_nan=False)
    u = draw(st.lists(st.floats(0.0, 3.0), min_size=n_orient, max_size=n_orient))
    drift = draw(st.lists(floats, min_size=n_orient, max_size=n_orient))
    diffusion = draw(st.lists(st.floats(0.0, 2.0), min_size=n_orient, max_size=n_orient))
    dW = draw(st.lists(floats, min_size=n_orient, max_size=n_orient))
    dt = draw(st.floats(1e-4, 0.5))
    return np.array(u), np.array(drift), np.array(diffusion), np.array(dW), dt


class TestReflectedEulerStep:
    """Tests for reflected_euler_step"""

    def test_interior_step(self):
        new = reflected_euler_step(ReflectedState.start([0.2]), [-1.0], [0.0], [0.0], 0.1)
        assert new.u[0] == pytest.approx(0.1, abs=1e-15)
        assert new.ell_tv[0] == 0.0
        assert new.t == pytest.approx(0.1)

    def test_projection_records_push(self):
        new = reflected_euler_step(ReflectedState.start([0.05]), [-1.0], [0.0], [0.0], 0.1)
        assert new.u[0] == 0.0
        assert new.ell_tv[0] == pytest.approx(0.05, abs=1e-15)
        assert new.ell[0] == -new.ell_tv[0]

    def test_inward_drift_at_boundary(self):
        new = reflected_euler_step(ReflectedState.start([0.0]), [2.0], [0.0], [0.0], 0.1)
        assert new.u[0] == pytest.approx(0.2)
        assert new.ell_tv[0] == 0.0

    def test_non_finite_proposal_reports_component(self):
        state = ReflectedState.start([0.5, 0.5])
        with pytest.raises(NonFiniteValueError) as exc:
            reflected_euler_step(state, [0.0, np.inf], [0.0, 0.0], [0.0, 0.0], 0.1, step=7)
        assert exc.value.component == 1
        assert "step 7" in str(exc.value)

    def test_nonpositive_dt_rejected(self):
        with pytest.raises(ValidationError):
            reflected_euler_step(ReflectedState.start([0.5]), [0.0], [0.0], [0.0], 0.0)

    def test_negative_start_rejected(self):
        with pytest.raises(ValidationError):
            ReflectedState.start([-0.1])

    @settings(max_examples=200, deadline=None)
    @given(inputs=step_inputs())
    def test_step_invariants(self, inputs):
        """
        **Feature: reflected-sde, Property 1: Positivity, ledger identity and complementarity**

        For any step, u' >= 0, l' = -|l|', and |l| grows only where u' = 0.
        """
        u, drift, diffusion, dW, dt = inputs
        state = ReflectedState.start(u)
        new = reflected_euler_step(state, drift, diffusion, dW, dt)
        new.validate()
        assert np.all(new.u >= 0.0)
        np.testing.assert_array_equal(new.ell + new.ell_tv, 0.0)
        grew = new.ell_tv > state.ell_tv
        assert np.all(new.u[grew] == 0.0)
        assert np.all(new.ell_tv >= state.ell_tv)

    @settings(max_examples=100, deadline=None)
    @given(u=st.floats(0.5, 2.0), drift=st.floats(-1.0, 1.0), dw=st.floats(-0.1, 0.1), h=st.floats(0.001, 0.05))
    def test_affine_in_increment_at_interior(self, u, drift, dw, h):
        """
        **Feature: reflected-sde, Property 2: Interior steps are affine in dW**

        Three increments that keep the proposal positive give collinear results.
        """
        state = ReflectedState.start([u])
        outs = [reflected_euler_step(state, [drift], [0.3], [w], 0.01).u[0] for w in (dw - h, dw, dw + h)]
        assert outs[2] - outs[1] == pytest.approx(outs[1] - outs[0], abs=1e-12)


class TestIntegratePath:
    """Tests for integrate_path"""

    def test_constant_path(self):
        initial = ReflectedState.start([0.7, 1.3])
        zero = lambda t, u: np.zeros_like(u)
        trajectory = integrate_path(initial, zero, zero, [np.zeros(2)] * 50, 0.02)
        np.testing.assert_array_equal(trajectory.final.u, [0.7, 1.3])
        np.testing.assert_array_equal(trajectory.final.ell_tv, 0.0)
        assert len(trajectory.states) == 51

    def test_exponential_relaxation(self):
        initial = ReflectedState.start([1.0])
        n_steps = 10_000
        trajectory = integrate_path(initial, lambda t, u: -u, lambda t, u: np.zeros_like(u),
                                    [np.zeros(1)] * n_steps, 1e-4, record_every=1000)
        assert trajectory.final.u[0] == pytest.approx(np.exp(-1.0), abs=1e-3)
        assert trajectory.final.t == pytest.approx(1.0)
        assert len(trajectory.times) == 11

    def test_negative_drift_at_zero_reflects_every_step(self):
        initial = ReflectedState.start([0.0])
        trajectory = integrate_path(initial, lambda t, u: np.full_like(u, -0.8), lambda t, u: np.zeros_like(u),
                                    [np.zeros(1)] * 1000, 1e-3)
        assert np.all(np.array([s.u[0] for s in trajectory.states]) == 0.0)
        assert trajectory.final.ell_tv[0] == pytest.approx(0.8, abs=1e-12)

    def test_running_max_tracks_peak(self):
        initial = ReflectedState.start([0.0])
        drift = lambda t, u: np.array([1.0]) if t < 0.5 - 1e-9 else np.array([-1.0])
        trajectory = integrate_path(initial, drift, lambda t, u: np.zeros_like(u), [np.zeros(1)] * 100, 0.01)
        assert trajectory.running_max[0] == pytest.approx(0.5, abs=1e-12)
        assert trajectory.final.u[0] == pytest.approx(0.0, abs=1e-12)

    def test_invalid_record_policy(self):
        with pytest.raises(ValidationError):
            integrate_path(ReflectedState.start([1.0]), None, None, [], 0.1, record_every=0)
