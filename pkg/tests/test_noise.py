"""
Tests for keyed random streams and the correlated noise field
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from src.errors import ValidationError
from src.noise import (
    CoarsenedStream,
    IncrementStream,
    Mollifier,
    build_field,
    covariance,
    covariance_matrix,
    default_epsilon,
    quadratic_variation_constant,
    sample_increments,
    verify_statistics,
)
from src.particles import grid_locations
from src.streams import derive_seed, keyed_generator, stream_key


def _bump(r):
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


# ============================================================================
# Keyed streams
# ============================================================================

class TestKeyedStreams:
    """Tests for keyed_generator and derive_seed"""

    def test_same_address_same_stream(self):
        a = keyed_generator(7, "noise", 3, 2).standard_normal(16)
        b = keyed_generator(7, "noise", 3, 2).standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_addresses_are_separated(self):
        base = keyed_generator(7, "noise", 3, 2).standard_normal(16)
        for other in (keyed_generator(8, "noise", 3, 2), keyed_generator(7, "init", 3, 2),
                      keyed_generator(7, "noise", 2, 3)):
            assert not np.array_equal(base, other.standard_normal(16))

    def test_negative_key_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            stream_key("noise", -1)

    def test_derive_seed_is_stable(self):
        assert derive_seed(11, "replica", 4) == derive_seed(11, "replica", 4)
        assert derive_seed(11, "replica", 4) != derive_seed(11, "replica", 5)


# ============================================================================
# Covariance
# ============================================================================

class TestCovariance:
    """Tests for the mollified covariance"""

    @pytest.mark.parametrize("profile", ["bump", "polynomial"])
    @pytest.mark.parametrize("space_dim", [1, 2])
    def test_unit_variance_at_same_point(self, profile, space_dim):
        x = np.full(space_dim, 0.4)
        assert covariance(x, x, 0.1, Mollifier(profile, space_dim)) == pytest.approx(1.0, abs=1e-8)

    def test_exactly_zero_beyond_two_epsilon(self):
        assert covariance([0.2], [0.5], 0.1, Mollifier("bump", 1)) == 0.0
        assert covariance([0.2, 0.2], [0.2, 0.45], 0.1, Mollifier("polynomial", 2)) == 0.0

    def test_matches_independent_trapezoid(self):
        """eps = 0.1 and |x - y| = 0.1: overlap at unit separation in rescaled units"""
        w = np.linspace(-1.0, 2.0, 3_000_001)
        overlap = integrate.trapezoid(_bump(np.abs(w)) * _bump(np.abs(w - 1.0)), w)
        expected = overlap / integrate.trapezoid(_bump(np.abs(w)) ** 2, w)
        assert covariance([0.3], [0.4], 0.1, Mollifier("bump", 1)) == pytest.approx(expected, rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(x=st.floats(0.0, 1.0), y=st.floats(0.0, 1.0))
    def test_symmetric_and_bounded(self, x, y):
        """
        **Feature: noise-field, Property 1: Covariance is symmetric with values in [0, 1]**
        """
        mollifier = Mollifier("polynomial", 1)
        c_xy = covariance([x], [y], 0.2, mollifier)
        assert c_xy == covariance([y], [x], 0.2, mollifier)
        assert -1e-12 <= c_xy <= 1.0 + 1e-8

    def test_nonpositive_epsilon_rejected(self):
        with pytest.raises(ValidationError):
            covariance([0.1], [0.2], 0.0, Mollifier())

    def test_unknown_profile_rejected(self):
        with pytest.raises(ValidationError):
            covariance([0.1], [0.2], 0.1, Mollifier("tophat", 1))

    def test_default_epsilon(self):
        assert default_epsilon(8, 1) == pytest.approx(1.0 / 24.0)
        assert default_epsilon(16, 2) == pytest.approx(1.0 / 12.0)

    def test_quadratic_variation_constant_positive(self):
        c = quadratic_variation_constant(Mollifier("bump", 1))
        assert np.isfinite(c) and c > 0


# ============================================================================
# Field construction
# ============================================================================

class TestBuildField:
    """Tests for build_field"""

    def test_far_pair_gives_identity(self):
        field = build_field([[0.1], [0.9]], 0.1, Mollifier("bump", 1))
        assert field.is_identity
        np.testing.assert_array_equal(field.factor, np.eye(2))

    def test_single_location(self):
        field = build_field([[0.5]], 0.3, Mollifier("bump", 1))
        np.testing.assert_array_equal(field.factor, [[1.0]])

    def test_factor_recomposes_covariance(self):
        grid = grid_locations(8, 1)
        mollifier = Mollifier("bump", 1)
        field = build_field(grid.points, 0.3, mollifier)
        recomposed = field.factor @ field.factor.T
        np.testing.assert_allclose(recomposed, covariance_matrix(grid.points, 0.3, mollifier), atol=1e-10)
        assert field.jitter <= 1e-8

    def test_sigma_structure(self):
        grid = grid_locations(16, 1)
        field = build_field(grid.points, 0.1, Mollifier("bump", 1))
        sigma = field.covariance
        np.testing.assert_array_equal(sigma, sigma.T)
        np.testing.assert_allclose(np.diag(sigma), 1.0, atol=1e-8)
        assert np.all(sigma[field.far_mask()] == 0.0)

    def test_duplicate_locations_rejected(self):
        with pytest.raises(ValidationError, match="distinct"):
            build_field([[0.2], [0.2]], 0.1, Mollifier("bump", 1))


# ============================================================================
# Increments
# ============================================================================

class TestIncrements:
    """Tests for sample_increments and the increment streams"""

    def test_zero_dt_gives_zero(self, field4):
        np.testing.assert_array_equal(sample_increments(field4, 0.0, 0, 5, 1), np.zeros((4, 1)))

    def test_deterministic(self, field4):
        a = sample_increments(field4, 0.01, 2, 17, 99)
        b = sample_increments(field4, 0.01, 2, 17, 99)
        np.testing.assert_array_equal(a, b)

    def test_stream_matches_direct_sampling(self, field4):
        stream = IncrementStream(field4, 0.01, 5, column_keys=[3, 1])
        for n in (0, 15, 16, 40):
            block = stream.increments(n)
            np.testing.assert_array_equal(block[:, 0, :], sample_increments(field4, 0.01, 3, n, 5))
            np.testing.assert_array_equal(block[:, 1, :], sample_increments(field4, 0.01, 1, n, 5))

    def test_permuted_keys_permute_columns(self, field4):
        plain = IncrementStream(field4, 0.01, 5, column_keys=[0, 1, 2])
        permuted = IncrementStream(field4, 0.01, 5, column_keys=[2, 0, 1])
        for n in range(20):
            np.testing.assert_array_equal(permuted.increments(n), plain.increments(n)[:, [2, 0, 1], :])

    def test_coarsened_stream_sums_fine_steps(self, field4):
        fine = IncrementStream(field4, 0.005, 5, column_keys=[0, 1])
        coarse = CoarsenedStream(IncrementStream(field4, 0.005, 5, column_keys=[0, 1]), 2)
        assert coarse.dt == pytest.approx(0.01)
        for n in range(10):
            np.testing.assert_allclose(coarse.increments(n), fine.increments(2 * n) + fine.increments(2 * n + 1),
                                       rtol=0, atol=1e-15)

    def test_far_pair_uncorrelated(self):
        field = build_field([[0.1], [0.9]], 0.1, Mollifier("bump", 1))
        stream = IncrementStream(field, 1.0, 21, column_keys=[0])
        draws = np.stack([stream.increments(n)[:, 0, 0] for n in range(100_000)])
        corr = np.corrcoef(draws.T)[0, 1]
        assert abs(corr) < 3.0 / np.sqrt(100_000)

    def test_summed_increments_have_summed_variance(self, field4):
        """Sum of 4 steps of size dt has the variance of one step of size 4 dt"""
        stream = IncrementStream(field4, 0.25, 8, column_keys=[0])
        n_samples = 10_000
        sums = np.array([sum(stream.increments(4 * s + j)[0, 0, 0] for j in range(4)) for s in range(n_samples)])
        variance = float(np.mean(sums ** 2))
        assert abs(variance - 1.0) < 3.0 * np.sqrt(2.0 / n_samples)

    def test_stream_rejects_nonpositive_dt(self, field4):
        with pytest.raises(ValidationError):
            IncrementStream(field4, 0.0, 1)


class TestVerifyStatistics:
    """Empirical noise statistics against the analytic covariance"""

    def test_reference_configuration(self):
        grid = grid_locations(32, 1)
        field = build_field(grid.points, 0.1, Mollifier("bump", 1))
        report = verify_statistics(field, 0.01, 100_000, master_seed=2024)
        assert report.qv_ratio_bound_ok
        assert report.max_far_corr < 0.02
        assert report.max_cov_z < 6.0
        assert abs(report.diag_variance_min - 1.0) < 0.025
        assert abs(report.diag_variance_max - 1.0) < 0.025
        assert set(report.to_dict()) >= {"max_cov_error", "max_far_corr", "qv_ratio_bound_ok"}

    def test_too_few_samples_rejected(self, field4):
        with pytest.raises(ValidationError):
            verify_statistics(field4, 0.01, 500, master_seed=1)
