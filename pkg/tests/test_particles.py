"""
Tests for the interacting particle system
Grid geometry, Holder initial fields, empirical measures and simulate_system
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.errors import ValidationError
from src.model import build_concrete_model, build_linear_test_model
from src.noise import IncrementStream, Mollifier, build_field
from src.particles import (
    HolderFieldFamily,
    ParticleEnsemble,
    ReflectedStepper,
    empirical_measure,
    grid_locations,
    holder_initial_field,
    simulate_system,
)
from tests.conftest import make_params


def _holder_quotients(field, alpha, rng, n_pairs=1000, lo=1e-4, hi=1.0):
    x = rng.random((n_pairs, 1))
    dist = 10.0 ** rng.uniform(np.log10(lo), np.log10(hi), size=(n_pairs, 1))
    y = np.where(x + dist <= 1.0, x + dist, x - dist)
    keep = (y[:, 0] >= 0.0) & (y[:, 0] <= 1.0)
    x, y = x[keep], y[keep]
    diff = np.linalg.norm(field(x) - field(y), axis=1)
    return diff / np.abs(x - y)[:, 0] ** alpha


# ============================================================================
# Grid
# ============================================================================

class TestGridLocations:
    """Tests for grid_locations"""

    def test_single_column(self):
        grid = grid_locations(1, 1)
        np.testing.assert_array_equal(grid.points, [[0.5]])

    def test_square_grid(self):
        grid = grid_locations(4, 2)
        np.testing.assert_allclose(grid.points, [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])

    def test_line_spacing(self):
        grid = grid_locations(8, 1)
        assert np.min(np.diff(grid.points[:, 0])) == pytest.approx(0.125)
        assert grid.cell_diameter == pytest.approx(0.125)
        assert grid.cell_measure == pytest.approx(0.125)

    def test_not_a_perfect_power(self):
        with pytest.raises(ValidationError, match="perfect d-th power"):
            grid_locations(6, 2)

    @settings(max_examples=50, deadline=None)
    @given(m=st.integers(1, 6), d=st.integers(1, 3))
    def test_points_are_cell_centroids(self, m, d):
        """
        **Feature: particle-system, Property 1: Every grid point is the centroid of its own cell**
        """
        grid = grid_locations(m ** d, d)
        assert grid.points.shape == (m ** d, d)
        np.testing.assert_array_equal(grid.nearest_index(grid.points), np.arange(m ** d))
        np.testing.assert_allclose((grid.points * m) % 1.0, 0.5)


# ============================================================================
# Initial data
# ============================================================================

class TestHolderInitialField:
    """Tests for holder_initial_field"""

    def test_no_modes_is_log_two(self):
        field = holder_initial_field(0.5, 2, 0, 1.0, master_seed=4, k=0)
        np.testing.assert_allclose(field(np.linspace(0, 1, 11)[:, None]), np.log(2.0), rtol=1e-15)

    def test_deterministic_per_key(self):
        xs = np.linspace(0.0, 1.0, 100)[:, None]
        a = holder_initial_field(0.7, 1, 32, 0.5, master_seed=4, k=3)(xs)
        b = holder_initial_field(0.7, 1, 32, 0.5, master_seed=4, k=3)(xs)
        c = holder_initial_field(0.7, 1, 32, 0.5, master_seed=4, k=4)(xs)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("alpha", [0.5, 1.0])
    def test_quotients_within_declared_seminorm(self, alpha, rng):
        field = holder_initial_field(alpha, 2, 64, 0.5, master_seed=8, k=1)
        quotients = _holder_quotients(field, alpha, rng)
        assert np.all(field(rng.random((200, 1))) >= 0.0)
        assert quotients.max() <= 1.05 * field.declared_seminorm

    def test_rough_field_has_large_lipschitz_quotients(self, rng):
        field = holder_initial_field(0.5, 1, 64, 0.5, master_seed=8, k=1)
        near = _holder_quotients(field, 1.0, rng, lo=1e-4, hi=1e-3)
        far = _holder_quotients(field, 1.0, rng, lo=0.3, hi=0.9)
        assert near.max() > 2.0 * far.max()

    def test_invalid_alpha_rejected(self):
        with pytest.raises(ValidationError):
            holder_initial_field(0.0, 1, 8, 1.0, master_seed=1, k=0)
        with pytest.raises(ValidationError):
            HolderFieldFamily(alpha=1.5).validate()


# ============================================================================
# Empirical measure
# ============================================================================

class TestEmpiricalMeasure:
    """Tests for empirical_measure"""

    def test_single_atom(self):
        grid = grid_locations(1, 1)
        ensemble = ParticleEnsemble(grid, np.array([[[0.3]]]), np.zeros((1, 1, 1)))
        measure = empirical_measure(ensemble)
        assert measure.size == 1
        np.testing.assert_array_equal(measure.weights, [1.0])

    def test_moments_are_plain_averages(self, rng):
        grid = grid_locations(4, 1)
        u = rng.uniform(0.0, 2.0, size=(4, 3, 2))
        measure = empirical_measure(ParticleEnsemble(grid, u, np.zeros_like(u)))
        assert measure.size == 12
        assert measure.integrate(lambda y, v: np.ones(y.shape[0])) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(measure.moments(), u.reshape(-1, 2).mean(axis=0), rtol=0, atol=1e-14)
        np.testing.assert_array_equal(measure.points[3 * 2], grid.points[2])


# ============================================================================
# simulate_system
# ============================================================================

class TestSimulateSystem:
    """Tests for simulate_system"""

    def test_scalar_relaxation_oracle(self):
        grid = grid_locations(1, 1)
        model = build_linear_test_model(coupling=0.0, sigma=0.0, sigma_coupling=0.0)
        noise = build_field(grid.points, 0.1, Mollifier("bump", 1))
        init = HolderFieldFamily(n_modes=0, master_seed=0)
        result = simulate_system(model, grid, 1, noise, init, 1.0, 1e-4, master_seed=0, record_times=[0.0, 1.0])
        assert result.snapshots[-1, 0, 0, 0] == pytest.approx(np.log(2.0) * np.exp(-1.0), abs=1e-3)

    def test_decoupled_columns_ignore_neighbours(self, grid4, field4, init_family):
        model = build_concrete_model(make_params(coupling=0.0))
        one = simulate_system(model, grid4, 1, field4, init_family, 0.32, 0.01, master_seed=5)
        two = simulate_system(model, grid4, 2, field4, init_family, 0.32, 0.01, master_seed=5)
        np.testing.assert_array_equal(one.snapshots[:, :, 0, :], two.snapshots[:, :, 0, :])

    def test_positivity_and_complementarity(self, grid4, field4, init_family):
        params = make_params(base=-2.0, firing_rate="rectifier", sigma=5.0)
        model = build_concrete_model(params)
        times = np.round(np.arange(0, 51) * 0.002, 12)
        result = simulate_system(model, grid4, 3, field4, init_family, 0.1, 0.002, master_seed=2,
                                 record_times=times)
        assert np.all(result.snapshots >= 0.0)
        np.testing.assert_array_equal(result.final.ell, -result.final.ell_tv)
        grew = np.diff(result.ledgers, axis=0) > 0
        assert np.all(result.snapshots[1:][grew] == 0.0)
        assert np.any(grew)

    def test_key_permutation_permutes_paths(self, grid4, field4, init_family):
        model = build_concrete_model(make_params())
        plain = simulate_system(model, grid4, 3, field4, init_family, 0.32, 0.01, master_seed=7,
                                column_keys=[0, 1, 2])
        permuted = simulate_system(model, grid4, 3, field4, init_family, 0.32, 0.01, master_seed=7,
                                   column_keys=[2, 0, 1])
        np.testing.assert_allclose(permuted.snapshots, plain.snapshots[:, :, [2, 0, 1], :], rtol=0, atol=1e-10)

    def test_general_path_matches_fast_path(self, grid4, field4, init_family):
        model = build_concrete_model(make_params(base=0.3))
        fast = simulate_system(model, grid4, 2, field4, init_family, 0.32, 0.01, master_seed=3)
        general = simulate_system(model, grid4, 2, field4, init_family, 0.32, 0.01, master_seed=3,
                                  use_general_path=True)
        np.testing.assert_allclose(general.snapshots, fast.snapshots, rtol=1e-12, atol=1e-12)

    def test_default_record_times(self, grid4, field4, init_family):
        model = build_concrete_model(make_params())
        result = simulate_system(model, grid4, 1, field4, init_family, 0.32, 0.01, master_seed=1)
        assert result.snapshots.shape == (33, 4, 1, 1)
        assert result.times[-1] == pytest.approx(0.32)
        assert result.measure_at(0).size == 4

    def test_record_time_off_grid_rejected(self, grid4, field4, init_family):
        model = build_concrete_model(make_params())
        with pytest.raises(ValidationError, match="multiples of dt"):
            simulate_system(model, grid4, 1, field4, init_family, 0.1, 0.01, master_seed=1,
                            record_times=[0.0, 0.015])

    def test_noise_on_other_locations_rejected(self, grid4, init_family):
        model = build_concrete_model(make_params())
        noise = build_field(grid_locations(8, 1).points, 0.1, Mollifier("bump", 1))
        with pytest.raises(ValidationError, match="coincide"):
            simulate_system(model, grid4, 1, noise, init_family, 0.1, 0.01, master_seed=1)


# ============================================================================
# ReflectedStepper
# ============================================================================

class _ConstantPush(ReflectedStepper):
    """Constant drift, no diffusion"""

    def __init__(self, *args, push: float = -1.0):
        super().__init__(*args)
        self.push = push

    def coefficients(self, t):
        return np.full_like(self.u, self.push), np.zeros_like(self.u)


class TestReflectedStepper:
    """Tests for the ReflectedStepper base class"""

    def test_base_class_cannot_be_instantiated(self, grid4, field4):
        stream = IncrementStream(field4, 0.1, master_seed=0, column_keys=[0])
        with pytest.raises(TypeError):
            ReflectedStepper(grid4, np.ones((4, 1, 1)), stream, 0.1)

    def test_subclass_without_coefficients_rejected(self, grid4, field4):
        class NoCoefficients(ReflectedStepper):
            pass

        stream = IncrementStream(field4, 0.1, master_seed=0, column_keys=[0])
        with pytest.raises(TypeError, match="coefficients"):
            NoCoefficients(grid4, np.ones((4, 1, 1)), stream, 0.1)

    def test_subclass_steps_with_reflection(self, grid4, field4):
        stream = IncrementStream(field4, 0.1, master_seed=0, column_keys=[0])
        stepper = _ConstantPush(grid4, np.full((4, 1, 1), 0.05), stream, 0.1)
        stepper.advance()
        ensemble = stepper.ensemble()
        np.testing.assert_array_equal(ensemble.u, 0.0)
        np.testing.assert_allclose(ensemble.ell_tv, 0.05)
        assert ensemble.step == 1
        assert ensemble.t == pytest.approx(0.1)
