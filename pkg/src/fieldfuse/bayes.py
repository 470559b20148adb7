"""Closed-form Bayesian fusion of two fields constrained by measured QoIs.

With a Gaussian prior N(mean, Sigma) on the field and a Gaussian likelihood
for the measured QoIs z = H.T y + noise, the posterior is Gaussian with

    precision  A     = H H.T / tau_sq + Sigma^{-1}
    mode       y_map = A^{-1} (H z / tau_sq + Sigma^{-1} mean)
    covariance Gamma = A^{-1}

Everything here runs off one symmetric positive-definite factorization of A;
A is never inverted to solve for the mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, get_lapack_funcs
from scipy.stats import norm

from .errors import NumericalError
from .geometry import OutputOperator, SurfaceGrid, apply_forward
from .prior import Hyperparameters, PriorSpec, build_prior, cholesky_lower

__all__ = [
    "QoIMeasurement",
    "BayesResult",
    "map_estimate",
    "posterior_covariance",
    "confidence_bands",
    "sample_posterior",
    "run_bayesian_fusion",
    "write_bayes_result_csv",
    "bayes_summary",
]

#: above this cell count, run_bayesian_fusion keeps only diag(Gamma) by default
FULL_COV_MAX_N = 2000


@dataclass(frozen=True)
class QoIMeasurement:
    """Measured QoI vector with its (scalar, isotropic) noise variance."""

    z: np.ndarray
    noise_variance: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        if not np.all(np.isfinite(z)):
            raise ValueError("measurements contain non-finite entries")
        if self.noise_variance <= 0.0:
            raise ValueError("noise_variance must be positive")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def m(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class BayesResult:
    """Posterior summary: mode, pointwise variance, fit diagnostics."""

    y_map: np.ndarray
    posterior_cov_diag: np.ndarray
    theta: float
    qoi_fit: np.ndarray
    misfit: float
    qoi_names: tuple[str, ...] = ()
    full_cov: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y_map, dtype=float).ravel()
        d = np.asarray(self.posterior_cov_diag, dtype=float).ravel()
        if d.shape != y.shape:
            raise ValueError("posterior_cov_diag length does not match y_map")
        if np.any(d < 0.0):
            raise ValueError("posterior variances must be nonnegative")
        y.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "y_map", y)
        object.__setattr__(self, "posterior_cov_diag", d)

    @property
    def n(self) -> int:
        return self.y_map.shape[0]


class _PosteriorFactor:
    """One-time Cholesky factorization of A = H H.T/tau_sq + Sigma^{-1},
    reused for the mode, the covariance diagonal and full inversion."""

    def __init__(self, op: OutputOperator, tau_sq: float, prior: PriorSpec):
        if tau_sq <= 0.0:
            raise ValueError("tau_sq must be positive")
        if op.n != prior.n:
            raise ValueError("operator and prior dimensions differ")
        self.op = op
        self.tau_sq = float(tau_sq)
        self.prior = prior

        sigma = prior.covariance
        potrf, potri = get_lapack_funcs(("potrf", "potri"), (sigma,))
        c, info = potrf(sigma, lower=1, overwrite_a=0)
        if info != 0:
            raise NumericalError(
                "prior covariance is not positive definite; increase the nugget"
            )
        inv, info = potri(c, lower=1, overwrite_c=1)
        if info != 0:
            raise NumericalError("prior covariance inversion failed")
        self.sigma_inv = np.tril(inv) + np.tril(inv, -1).T

        a = self.sigma_inv.copy()
        H = op.matrix
        for j in range(op.m):
            a += np.outer(H[:, j], H[:, j]) / self.tau_sq
        chol, info = potrf(a, lower=1, overwrite_a=1)
        if info != 0:
            raise NumericalError("posterior precision factorization failed")
        self.chol = chol

    def apply_precision(self, y: np.ndarray) -> np.ndarray:
        H = self.op.matrix
        return H @ (H.T @ y) / self.tau_sq + self.sigma_inv @ y

    def solve(self, rhs: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
        """Solve A y = rhs with iterative refinement to the residual target."""
        y = cho_solve((self.chol, True), rhs)
        norm_rhs = np.linalg.norm(rhs)
        for _ in range(3):
            residual = rhs - self.apply_precision(y)
            if np.linalg.norm(residual) <= rtol * norm_rhs:
                return y
            y = y + cho_solve((self.chol, True), residual)
        if np.linalg.norm(rhs - self.apply_precision(y)) > rtol * norm_rhs:
            raise NumericalError("posterior solve failed to reach residual target")
        return y

    def map_estimate(self, z_eff: np.ndarray) -> np.ndarray:
        rhs = self.op.matrix @ (z_eff / self.tau_sq) + self.sigma_inv @ self.prior.mean
        return self.solve(rhs)

    def covariance_diag(self) -> np.ndarray:
        # diag(A^{-1})_i = sum_k (L^{-1})_{ki}^2; trtri solves the n
        # triangular systems L X = I in one call
        trtri, = get_lapack_funcs(("trtri",), (self.chol,))
        linv, info = trtri(self.chol, lower=1, overwrite_c=0)
        if info != 0:
            raise NumericalError("triangular inversion failed")
        return np.einsum("ki,ki->i", np.tril(linv), np.tril(linv))

    def covariance_full(self) -> np.ndarray:
        potri, = get_lapack_funcs(("potri",), (self.chol,))
        inv, info = potri(self.chol.copy(), lower=1, overwrite_c=1)
        if info != 0:
            raise NumericalError("posterior covariance inversion failed")
        return np.tril(inv) + np.tril(inv, -1).T


def map_estimate(z: QoIMeasurement, op: OutputOperator, prior: PriorSpec) -> np.ndarray:
    """Posterior mode; the operator offset is subtracted from z pre-solve."""
    if z.m != op.m:
        raise ValueError("measurement length does not match the operator")
    factor = _PosteriorFactor(op, z.noise_variance, prior)
    return factor.map_estimate(z.z - op.offset)


def posterior_covariance(op: OutputOperator, tau_sq: float, prior: PriorSpec,
                         diag_only: bool = False) -> np.ndarray:
    """Posterior covariance Gamma (full matrix, or just its diagonal)."""
    factor = _PosteriorFactor(op, tau_sq, prior)
    return factor.covariance_diag() if diag_only else factor.covariance_full()


def confidence_bands(result: BayesResult, level: float = 0.95):
    """Two-sided Gaussian bands y_map +- q * sqrt(diag(Gamma))."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")
    q = norm.ppf(0.5 * (1.0 + level))
    half = q * np.sqrt(result.posterior_cov_diag)
    return result.y_map - half, result.y_map + half


def sample_posterior(result: BayesResult, count: int, seed: int) -> np.ndarray:
    """Draw fields from N(y_map, Gamma); requires the materialized full
    covariance."""
    if result.full_cov is None:
        raise ValueError("sample_posterior needs a result with the full covariance")
    if count < 1:
        raise ValueError("count must be positive")
    chol = cholesky_lower(result.full_cov)
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((count, result.n))
    return result.y_map[None, :] + xi @ chol.T


def run_bayesian_fusion(mu1, mu2, z: QoIMeasurement, op: OutputOperator,
                        grid: SurfaceGrid, hyper: Hyperparameters,
                        theta_override: float | None = None,
                        diag_only: bool | None = None) -> BayesResult:
    """End-to-end fusion: estimate theta, build the prior, factor once, then
    extract the mode and pointwise variances.

    ``diag_only=None`` materializes the full covariance only for grids of at
    most ``FULL_COV_MAX_N`` cells.
    """
    mu1 = np.asarray(mu1, dtype=float).ravel()
    mu2 = np.asarray(mu2, dtype=float).ravel()
    if mu1.shape[0] != op.n or mu2.shape[0] != op.n or grid.n != op.n:
        raise ValueError("field, grid and operator dimensions are inconsistent")
    if z.m != op.m:
        raise ValueError("measurement length does not match the operator")
    hyper = hyper.replace(tau_sq=z.noise_variance)
    prior = build_prior(mu1, mu2, op, z.z, grid, hyper, theta_override=theta_override)

    factor = _PosteriorFactor(op, z.noise_variance, prior)
    y_map = factor.map_estimate(z.z - op.offset)
    diag = factor.covariance_diag()
    if np.any(diag > np.diagonal(prior.covariance) + 1e-12):
        raise NumericalError("posterior variance exceeds prior variance")
    keep_full = (op.n <= FULL_COV_MAX_N) if diag_only is None else (not diag_only)
    full = factor.covariance_full() if keep_full else None

    qoi_fit = apply_forward(op, y_map)
    misfit = float(np.linalg.norm(z.z - qoi_fit))
    return BayesResult(y_map=y_map, posterior_cov_diag=np.maximum(diag, 0.0),
                       theta=prior.theta, qoi_fit=qoi_fit, misfit=misfit,
                       qoi_names=op.qoi_names, full_cov=full)


def write_bayes_result_csv(result: BayesResult, path, level: float = 0.95) -> None:
    """Per-cell export: cell_index, y_map, std, lower, upper."""
    lower, upper = confidence_bands(result, level)
    std = np.sqrt(result.posterior_cov_diag)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell_index", "y_map", "std", "lower", "upper"])
        for i in range(result.n):
            w.writerow([i, f"{result.y_map[i]:.17g}", f"{std[i]:.17g}",
                        f"{lower[i]:.17g}", f"{upper[i]:.17g}"])


def bayes_summary(result: BayesResult, op: OutputOperator, mu1, mu2,
                  z: QoIMeasurement) -> dict:
    """JSON-ready summary with the per-QoI comparison table
    (measured / MAP / field-1 / field-2)."""
    q1 = apply_forward(op, np.asarray(mu1, dtype=float).ravel())
    q2 = apply_forward(op, np.asarray(mu2, dtype=float).ravel())
    table = []
    for j, name in enumerate(op.qoi_names):
        table.append({
            "qoi": name,
            "measured": float(z.z[j]),
            "map": float(result.qoi_fit[j]),
            "field1": float(q1[j]),
            "field2": float(q2[j]),
        })
    return {
        "theta": float(result.theta),
        "misfit": float(result.misfit),
        "qoi_table": table,
    }
