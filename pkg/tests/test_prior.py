"""Tests for the sample-based prior: fusion weight, mean, covariance,
sampling and hyperparameter loading."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldfuse.errors import NumericalError
from fieldfuse.geometry import OutputOperator, build_output_operator
from fieldfuse.prior import (FieldSample, FlowCondition, Hyperparameters,
                             PriorSpec, build_prior, combined_variance,
                             estimate_theta, fuse_prior_mean,
                             prior_covariance, sample_prior)
from conftest import line_grid


def two_qoi_operator():
    H = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    return OutputOperator(H, ("C_l", "C_m"))


class TestEstimateTheta:
    def test_matches_first_source(self, naca_grid):
        op = build_output_operator(naca_grid, 0.1)
        rng = np.random.default_rng(0)
        mu1, mu2 = rng.standard_normal((2, naca_grid.n))
        z = op.matrix.T @ mu1
        assert estimate_theta(mu1, mu2, op, z) == pytest.approx(1.0, abs=1e-9)

    def test_matches_second_source(self, naca_grid):
        op = build_output_operator(naca_grid, 0.1)
        rng = np.random.default_rng(1)
        mu1, mu2 = rng.standard_normal((2, naca_grid.n))
        z = op.matrix.T @ mu2
        assert estimate_theta(mu1, mu2, op, z) == pytest.approx(0.0, abs=1e-9)

    def test_midpoint(self):
        op = two_qoi_operator()
        mu1 = np.array([1.0, 0.0, 0.0])
        mu2 = np.zeros(3)
        theta = estimate_theta(mu1, mu2, op, np.array([0.5, 0.0]))
        assert theta == pytest.approx(0.5, abs=1e-14)

    def test_degenerate_sources(self):
        op = two_qoi_operator()
        mu = np.array([0.3, -0.2, 0.9])
        assert estimate_theta(mu, mu, op, np.array([1.0, 1.0])) == 0.5

    def test_grid_search_oracle(self):
        op = two_qoi_operator()
        rng = np.random.default_rng(7)
        for _ in range(20):
            mu1, mu2 = rng.standard_normal((2, 3))
            z = rng.standard_normal(2)
            theta = estimate_theta(mu1, mu2, op, z)
            grid = np.linspace(0.0, 1.0, 1000)
            misfits = [np.linalg.norm(op.matrix.T @ (t * mu1 + (1 - t) * mu2) - z)
                       for t in grid]
            assert abs(theta - grid[int(np.argmin(misfits))]) <= 1.0 / 999

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 16))
    def test_optimality_against_random_weights(self, seed):
        op = two_qoi_operator()
        rng = np.random.default_rng(seed)
        mu1, mu2 = rng.standard_normal((2, 3))
        z = rng.standard_normal(2)
        theta = estimate_theta(mu1, mu2, op, z)

        def misfit(t):
            return np.linalg.norm(op.matrix.T @ fuse_prior_mean(mu1, mu2, t) - z)

        best = misfit(theta)
        for t in rng.uniform(0.0, 1.0, 100):
            assert best <= misfit(t) + 1e-12


class TestPriorMeanAndVariance:
    def test_endpoints(self):
        mu1, mu2 = np.array([1.0, 2.0]), np.array([3.0, -1.0])
        np.testing.assert_array_equal(fuse_prior_mean(mu1, mu2, 1.0), mu1)
        np.testing.assert_array_equal(fuse_prior_mean(mu1, mu2, 0.0), mu2)

    def test_identical_sources(self):
        mu = np.array([0.5, 0.25])
        for theta in (0.0, 0.3, 1.0):
            np.testing.assert_array_equal(fuse_prior_mean(mu, mu, theta), mu)

    def test_theta_out_of_range(self):
        with pytest.raises(ValueError):
            fuse_prior_mean(np.zeros(2), np.ones(2), 1.5)

    def test_combined_variance(self):
        assert combined_variance(0.0, 0.04, 0.09) == 0.09
        assert combined_variance(1.0, 0.04, 0.09) == 0.04
        assert combined_variance(0.5, 0.01, 0.01) == pytest.approx(0.005)


class TestPriorCovariance:
    def test_diagonal_value(self):
        grid = line_grid(16)
        cov = prior_covariance(grid, sigma_sq=0.04, length_scale=0.1,
                               nugget=1e-8)
        np.testing.assert_allclose(np.diag(cov), 0.04 * (1 + 1e-8))

    def test_one_length_scale_apart(self):
        grid = line_grid(2, length=2.0)  # centers at 0.5 and 1.5
        cov = prior_covariance(grid, sigma_sq=1.0, length_scale=1.0, nugget=0.0)
        assert cov[0, 1] == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_tiny_length_scale_is_numerically_diagonal(self):
        grid = line_grid(128)
        cov = prior_covariance(grid, sigma_sq=2.0, length_scale=1e-4)
        off = cov - np.diag(np.diag(cov))
        assert np.abs(off).max() < 1e-300 * 2.0

    def test_symmetric_and_factorizable(self, naca_grid):
        cov = prior_covariance(naca_grid, 0.01, 0.05, nugget=1e-10)
        np.testing.assert_array_equal(cov, cov.T)
        np.linalg.cholesky(cov)

    def test_stationarity_under_permutation(self):
        grid = line_grid(32)
        rng = np.random.default_rng(5)
        perm = rng.permutation(32)
        permuted = line_grid(32)
        permuted = type(permuted)(grid.cell_centers[perm],
                                  grid.cell_measures[perm],
                                  grid.unit_normals[perm])
        cov = prior_covariance(grid, 1.0, 0.2)
        cov_p = prior_covariance(permuted, 1.0, 0.2)
        np.testing.assert_allclose(cov_p, cov[np.ix_(perm, perm)], atol=1e-15)

    def test_bad_arguments(self):
        grid = line_grid(8)
        with pytest.raises(ValueError):
            prior_covariance(grid, 1.0, 0.0)
        with pytest.raises(ValueError):
            prior_covariance(grid, -1.0, 0.1)


class TestSamplePrior:
    def make_spec(self, n=16, sigma_sq=0.04):
        grid = line_grid(n)
        cov = prior_covariance(grid, sigma_sq, 1e-4)  # ~diagonal
        mean = np.linspace(-1.0, 1.0, n)
        return PriorSpec(mean, cov, theta=0.5, length_scale=1e-4)

    def test_seed_determinism(self):
        spec = self.make_spec()
        np.testing.assert_array_equal(sample_prior(spec, 50, seed=9),
                                      sample_prior(spec, 50, seed=9))

    def test_empirical_mean(self):
        spec = self.make_spec()
        draws = sample_prior(spec, 10_000, seed=1)
        bound = 4.0 * np.sqrt(0.04) / np.sqrt(10_000)
        assert np.abs(draws.mean(axis=0) - spec.mean).max() <= bound

    def test_empirical_variance_diagonal(self):
        spec = self.make_spec(sigma_sq=0.04)
        draws = sample_prior(spec, 10_000, seed=2)
        var = draws.var(axis=0)
        assert np.abs(var / 0.04 - 1.0).max() <= 0.10

    def test_indefinite_covariance_raises(self):
        cov = np.array([[1.0, 2.0], [2.0, 1.0]])  # symmetric, not PSD
        spec = PriorSpec(np.zeros(2), cov, theta=0.5, length_scale=1.0)
        with pytest.raises(NumericalError, match="nugget"):
            sample_prior(spec, 3, seed=0)


class TestTypesAndConfig:
    def test_field_sample_validation(self):
        with pytest.raises(ValueError):
            FieldSample(np.array([1.0, np.nan]), 0.01, "measurement")
        with pytest.raises(ValueError):
            FieldSample(np.ones(3), -0.1, "measurement")
        with pytest.raises(ValueError):
            FieldSample(np.ones(3), 0.1, "wind_tunnel")
        s = FieldSample(np.ones(3), 0.1, "simulation",
                        FlowCondition(0.7, 5.0, 1.5))
        assert s.n == 3 and s.condition.alpha_rad == pytest.approx(np.deg2rad(1.5))

    def test_prior_spec_validation(self):
        with pytest.raises(ValueError, match="symmetric"):
            PriorSpec(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]),
                      theta=0.5, length_scale=1.0)
        with pytest.raises(ValueError, match="theta"):
            PriorSpec(np.zeros(2), np.eye(2), theta=1.2, length_scale=1.0)

    def test_hyperparameters_defaults(self):
        hyper = Hyperparameters()
        assert hyper.tau_sq == 1e-6
        assert hyper.sigma1_sq == 1e-2 and hyper.sigma2_sq == 1e-2
        assert hyper.length_scale == 1e-4

    def test_from_json_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"hyperparameters": {"tau_sq": 1e-4, "length_scale": 0.01}}')
        hyper = Hyperparameters.from_file(path)
        assert hyper.tau_sq == 1e-4 and hyper.length_scale == 0.01

    def test_from_toml_file(self, tmp_path):
        path = tmp_path / "config.toml"
        path.write_text("[hyperparameters]\ntau_sq = 1e-2\nsigma1_sq = 0.5\n")
        hyper = Hyperparameters.from_file(path)
        assert hyper.tau_sq == 1e-2 and hyper.sigma1_sq == 0.5

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            Hyperparameters.from_dict({"tau": 1.0})


class TestBuildPrior:
    def test_assembles_consistent_spec(self, naca_grid):
        op = build_output_operator(naca_grid, 0.05)
        rng = np.random.default_rng(3)
        mu1, mu2 = rng.standard_normal((2, naca_grid.n))
        z = op.matrix.T @ (0.3 * mu1 + 0.7 * mu2)
        prior = build_prior(mu1, mu2, op, z, naca_grid, Hyperparameters())
        assert prior.theta == pytest.approx(0.3, abs=1e-9)
        np.testing.assert_allclose(
            prior.mean, fuse_prior_mean(mu1, mu2, prior.theta))
        expected_var = combined_variance(prior.theta, 1e-2, 1e-2)
        assert prior.covariance[0, 0] == pytest.approx(
            expected_var * (1 + 1e-10))

    def test_theta_override(self, naca_grid):
        op = build_output_operator(naca_grid, 0.05)
        rng = np.random.default_rng(4)
        mu1, mu2 = rng.standard_normal((2, naca_grid.n))
        prior = build_prior(mu1, mu2, op, np.zeros(2), naca_grid,
                            Hyperparameters(), theta_override=0.0)
        assert prior.theta == 0.0
        with pytest.raises(ValueError):
            build_prior(mu1, mu2, op, np.zeros(2), naca_grid,
                        Hyperparameters(), theta_override=-0.1)
