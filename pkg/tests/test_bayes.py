"""Tests for the closed-form Bayesian fusion machinery."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from fieldfuse.bayes import (BayesResult, QoIMeasurement, bayes_summary,
                             confidence_bands, map_estimate,
                             posterior_covariance, run_bayesian_fusion,
                             sample_posterior, write_bayes_result_csv)
from fieldfuse.geometry import OutputOperator, apply_forward
from fieldfuse.prior import Hyperparameters, PriorSpec, prior_covariance


def random_instance(rng, n=12, m=2, tau_sq=1e-2):
    """Small random linear-Gaussian problem with a well-conditioned prior."""
    H = rng.standard_normal((n, m))
    op = OutputOperator(H, tuple(f"q{j}" for j in range(m)))
    A = rng.standard_normal((n, n))
    cov = A @ A.T / n + np.eye(n)
    mean = rng.standard_normal(n)
    prior = PriorSpec(mean, cov, theta=0.5, length_scale=1.0)
    z = QoIMeasurement(rng.standard_normal(m), tau_sq)
    return op, prior, z


def cost_and_grad(y, op, prior, z):
    """The fused objective: QoI misfit over tau_sq plus prior quadratic."""
    resid = z.z - op.offset - op.matrix.T @ y
    dev = y - prior.mean
    sol = np.linalg.solve(prior.covariance, dev)
    J = 0.5 * (resid @ resid) / z.noise_variance + 0.5 * dev @ sol
    grad = -op.matrix @ resid / z.noise_variance + sol
    return J, grad


class TestMapEstimate:
    def test_precision_weighted_average(self):
        # one informative cell: posterior mean is the precision average
        op = OutputOperator(np.array([[1.0], [0.0]]), ("q0",))
        prior = PriorSpec(np.zeros(2), np.eye(2), theta=0.5, length_scale=1.0)
        y = map_estimate(QoIMeasurement([1.0], 1.0), op, prior)
        assert y[0] == pytest.approx(0.5, abs=1e-12)
        assert y[1] == pytest.approx(0.0, abs=1e-12)

    def test_prior_dominates_for_huge_noise(self, naca_grid):
        from fieldfuse.geometry import build_output_operator
        op = build_output_operator(naca_grid, 0.1)
        mean = np.sin(naca_grid.cell_centers[:, 0] * 3.0)
        cov = prior_covariance(naca_grid, 1e-2, 1e-4)
        prior = PriorSpec(mean, cov, theta=0.5, length_scale=1e-4)
        y = map_estimate(QoIMeasurement([0.8, -0.1], 1e12), op, prior)
        assert np.linalg.norm(y - mean) <= 1e-6 * np.linalg.norm(mean)

    def test_matches_numerical_minimizer(self):
        rng = np.random.default_rng(11)
        op, prior, z = random_instance(rng)
        y_map = map_estimate(z, op, prior)
        res = minimize(cost_and_grad, prior.mean, args=(op, prior, z),
                       jac=True, method="L-BFGS-B",
                       options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 2000})
        assert np.linalg.norm(y_map - res.x) <= 1e-6 * np.linalg.norm(y_map)

    def test_offset_subtracted(self):
        op = OutputOperator(np.array([[1.0], [0.0]]), ("q0",), offset=[0.25])
        prior = PriorSpec(np.zeros(2), np.eye(2), theta=0.5, length_scale=1.0)
        y = map_estimate(QoIMeasurement([1.25], 1.0), op, prior)
        assert y[0] == pytest.approx(0.5, abs=1e-12)

    def test_dimension_mismatch(self):
        op = OutputOperator(np.ones((3, 1)), ("q0",))
        prior = PriorSpec(np.zeros(3), np.eye(3), theta=0.5, length_scale=1.0)
        with pytest.raises(ValueError):
            map_estimate(QoIMeasurement([1.0, 2.0], 1.0), op, prior)

    def test_stationarity(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            op, prior, z = random_instance(rng, n=15)
            y_map = map_estimate(z, op, prior)
            _, grad = cost_and_grad(y_map, op, prior, z)
            scale = (np.linalg.norm(z.z) / z.noise_variance
                     + np.linalg.norm(np.linalg.solve(prior.covariance,
                                                      prior.mean)))
            assert np.linalg.norm(grad) <= 1e-8 * scale

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        op, prior, z = random_instance(rng, n=8)
        y = rng.standard_normal(8)
        _, grad = cost_and_grad(y, op, prior, z)
        fd = np.empty(8)
        h = 1e-6
        for i in range(8):
            e = np.zeros(8)
            e[i] = h
            fd[i] = (cost_and_grad(y + e, op, prior, z)[0]
                     - cost_and_grad(y - e, op, prior, z)[0]) / (2 * h)
        assert np.linalg.norm(grad - fd) <= 1e-5 * np.linalg.norm(grad)


class TestPosteriorCovariance:
    def test_scalar_value(self):
        op = OutputOperator(np.array([[1.0], [0.0]]), ("q0",))
        prior = PriorSpec(np.zeros(2), np.eye(2), theta=0.5, length_scale=1.0)
        cov = posterior_covariance(op, 1.0, prior)
        assert cov[0, 0] == pytest.approx(0.5, abs=1e-12)
        assert cov[1, 1] == pytest.approx(1.0, abs=1e-12)

    def test_no_information_returns_prior(self):
        # negligible operator: the formula collapses to the prior covariance
        H = np.array([[1e-150, 0.0], [0.0, 1e-150], [0.0, 0.0]])
        op = OutputOperator(H, ("q0", "q1"))
        cov_prior = np.diag([1.0, 2.0, 0.5])
        prior = PriorSpec(np.zeros(3), cov_prior, theta=0.5, length_scale=1.0)
        np.testing.assert_allclose(posterior_covariance(op, 1.0, prior),
                                   cov_prior, atol=1e-10)

    def test_matches_dense_inverse(self):
        rng = np.random.default_rng(12)
        op, prior, z = random_instance(rng)
        gamma = posterior_covariance(op, z.noise_variance, prior)
        precision = (op.matrix @ op.matrix.T / z.noise_variance
                     + np.linalg.inv(prior.covariance))
        np.testing.assert_allclose(gamma, np.linalg.inv(precision), atol=1e-10)

    def test_diag_only_matches_full(self):
        rng = np.random.default_rng(13)
        op, prior, z = random_instance(rng, n=20)
        full = posterior_covariance(op, z.noise_variance, prior)
        diag = posterior_covariance(op, z.noise_variance, prior, diag_only=True)
        np.testing.assert_allclose(diag, np.diag(full), atol=1e-12)

    def test_never_exceeds_prior_variance(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            op, prior, z = random_instance(rng)
            diag = posterior_covariance(op, z.noise_variance, prior,
                                        diag_only=True)
            assert np.all(diag <= np.diag(prior.covariance) + 1e-12)


class TestConfidenceBands:
    def result_with_diag(self, diag):
        n = len(diag)
        return BayesResult(y_map=np.zeros(n), posterior_cov_diag=diag,
                           theta=0.5, qoi_fit=np.zeros(2), misfit=0.0)

    def test_half_width_at_95(self):
        res = self.result_with_diag(np.full(4, 0.25))
        lower, upper = confidence_bands(res, 0.95)
        np.testing.assert_allclose(upper - lower, 2 * 1.959964 * 0.5,
                                   atol=1e-5)

    def test_zero_variance_collapses(self):
        res = self.result_with_diag(np.zeros(4))
        lower, upper = confidence_bands(res, 0.95)
        np.testing.assert_array_equal(lower, res.y_map)
        np.testing.assert_array_equal(upper, res.y_map)

    def test_level_validation(self):
        res = self.result_with_diag(np.ones(2))
        for level in (0.0, 1.0, -0.3, 1.7):
            with pytest.raises(ValueError):
                confidence_bands(res, level)

    def test_monte_carlo_coverage(self):
        rng = np.random.default_rng(15)
        op, prior, z = random_instance(rng, n=8)
        full = posterior_covariance(op, z.noise_variance, prior)
        y_map = map_estimate(z, op, prior)
        res = BayesResult(y_map=y_map, posterior_cov_diag=np.diag(full),
                          theta=0.5, qoi_fit=np.zeros(2), misfit=0.0,
                          full_cov=full)
        draws = sample_posterior(res, 100_000, seed=21)
        lower, upper = confidence_bands(res, 0.95)
        covered = ((draws >= lower) & (draws <= upper)).mean(axis=0)
        assert np.all(covered >= 0.94) and np.all(covered <= 0.96)


class TestSamplePosterior:
    def make_result(self, seed=16, n=10):
        rng = np.random.default_rng(seed)
        op, prior, z = random_instance(rng, n=n)
        full = posterior_covariance(op, z.noise_variance, prior)
        y_map = map_estimate(z, op, prior)
        res = BayesResult(y_map=y_map, posterior_cov_diag=np.diag(full),
                          theta=0.5, qoi_fit=np.zeros(2), misfit=0.0,
                          full_cov=full)
        return op, res

    def test_seed_determinism(self):
        _, res = self.make_result()
        np.testing.assert_array_equal(sample_posterior(res, 40, seed=3),
                                      sample_posterior(res, 40, seed=3))

    def test_empirical_mean(self):
        _, res = self.make_result()
        draws = sample_posterior(res, 10_000, seed=4)
        bound = 4.0 * np.sqrt(res.posterior_cov_diag.max() / 10_000)
        assert np.abs(draws.mean(axis=0) - res.y_map).max() <= bound

    def test_qoi_propagation(self):
        op, res = self.make_result()
        draws = sample_posterior(res, 10_000, seed=5)
        qois = draws @ op.matrix + op.offset
        expected = np.sqrt(np.diag(op.matrix.T @ res.full_cov @ op.matrix))
        np.testing.assert_allclose(qois.std(axis=0, ddof=1), expected,
                                   rtol=0.10)

    def test_requires_full_cov(self):
        _, res = self.make_result()
        bare = BayesResult(y_map=res.y_map,
                           posterior_cov_diag=res.posterior_cov_diag,
                           theta=0.5, qoi_fit=np.zeros(2), misfit=0.0)
        with pytest.raises(ValueError, match="full covariance"):
            sample_posterior(bare, 10, seed=0)


class TestRunBayesianFusion:
    def test_stock_misfit(self, stock_bundle):
        z = QoIMeasurement(stock_bundle.z_measured, 1e-6)
        res = run_bayesian_fusion(stock_bundle.mu_wt_filled,
                                  stock_bundle.mu_cfd, z,
                                  stock_bundle.operator, stock_bundle.grid,
                                  Hyperparameters())
        assert np.abs(res.qoi_fit - stock_bundle.z_measured).max() <= 1e-3

    def test_theta_override_moves_toward_simulation(self, stock_bundle):
        z = QoIMeasurement(stock_bundle.z_measured, 1e-6)
        args = (stock_bundle.operator, stock_bundle.grid, Hyperparameters())
        free = run_bayesian_fusion(stock_bundle.mu_wt_filled,
                                   stock_bundle.mu_cfd, z, *args)
        pinned = run_bayesian_fusion(stock_bundle.mu_wt_filled,
                                     stock_bundle.mu_cfd, z, *args,
                                     theta_override=0.0)
        assert pinned.theta == 0.0
        d_pinned = np.linalg.norm(pinned.y_map - stock_bundle.mu_cfd)
        d_free = np.linalg.norm(free.y_map - stock_bundle.mu_cfd)
        assert d_pinned < d_free

    def test_self_consistent_fixed_point(self, naca_grid):
        from fieldfuse.geometry import build_output_operator
        op = build_output_operator(naca_grid, 0.05)
        y = np.cos(2.0 * naca_grid.cell_centers[:, 0])
        z = QoIMeasurement(apply_forward(op, y), 1e12)
        res = run_bayesian_fusion(y, y, z, op, naca_grid,
                                  Hyperparameters(tau_sq=1e12))
        assert np.linalg.norm(res.y_map - y) <= 1e-8 * np.linalg.norm(y)

    def test_monotone_misfit_in_tau(self, stock_bundle):
        misfits = []
        for tau_sq in (1e-6, 1e-4, 1e-2):
            z = QoIMeasurement(stock_bundle.z_measured, tau_sq)
            res = run_bayesian_fusion(stock_bundle.mu_wt_filled,
                                      stock_bundle.mu_cfd, z,
                                      stock_bundle.operator,
                                      stock_bundle.grid,
                                      Hyperparameters(tau_sq=tau_sq))
            misfits.append(np.linalg.norm(stock_bundle.z_measured - res.qoi_fit))
        assert misfits[0] <= misfits[1] + 1e-10
        assert misfits[1] <= misfits[2] + 1e-10

    def test_diag_only_skips_full_cov(self, stock_bundle):
        z = QoIMeasurement(stock_bundle.z_measured, 1e-6)
        res = run_bayesian_fusion(stock_bundle.mu_wt_filled,
                                  stock_bundle.mu_cfd, z,
                                  stock_bundle.operator, stock_bundle.grid,
                                  Hyperparameters(), diag_only=True)
        assert res.full_cov is None
        assert np.all(res.posterior_cov_diag >= 0.0)

    def test_exports(self, stock_bundle, tmp_path):
        z = QoIMeasurement(stock_bundle.z_measured, 1e-6)
        res = run_bayesian_fusion(stock_bundle.mu_wt_filled,
                                  stock_bundle.mu_cfd, z,
                                  stock_bundle.operator, stock_bundle.grid,
                                  Hyperparameters())
        path = tmp_path / "field.csv"
        write_bayes_result_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "cell_index,y_map,std,lower,upper"
        assert len(lines) == stock_bundle.grid.n + 1
        summary = bayes_summary(res, stock_bundle.operator,
                                stock_bundle.mu_wt_filled,
                                stock_bundle.mu_cfd, z)
        assert {row["qoi"] for row in summary["qoi_table"]} == {"C_l", "C_m"}
        assert summary["theta"] == res.theta
