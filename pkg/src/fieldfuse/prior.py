"""Sample-based prior for field fusion.

The prior mean is a convex combination of the two fidelity fields with
weight ``theta`` chosen so the combination's predicted QoIs best match the
measured ones; the prior covariance is a squared-exponential kernel over
cell-center coordinates, scaled by the combined dataset variance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import NumericalError
from .geometry import OutputOperator, SurfaceGrid

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "FlowCondition",
    "FieldSample",
    "PriorSpec",
    "Hyperparameters",
    "estimate_theta",
    "fuse_prior_mean",
    "combined_variance",
    "prior_covariance",
    "sample_prior",
    "build_prior",
]

FIDELITIES = ("simulation", "measurement")


@dataclass(frozen=True)
class FlowCondition:
    """Flight condition: Mach number, Reynolds number (millions), angle of
    attack in degrees."""

    mach: float
    reynolds: float
    alpha_deg: float

    @property
    def alpha_rad(self) -> float:
        return float(np.deg2rad(self.alpha_deg))

    def as_dict(self) -> dict:
        return {"mach": self.mach, "reynolds": self.reynolds,
                "alpha_deg": self.alpha_deg}


@dataclass(frozen=True)
class FieldSample:
    """A field vector of one fidelity with known scalar variance."""

    values: np.ndarray
    variance: float
    fidelity: str
    condition: FlowCondition | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(values)):
            raise ValueError("field sample contains non-finite values")
        if self.variance < 0.0:
            raise ValueError("variance must be nonnegative")
        if self.fidelity not in FIDELITIES:
            raise ValueError(f"fidelity must be one of {FIDELITIES}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior: mean, covariance and the parameters that built them."""

    mean: np.ndarray
    covariance: np.ndarray
    theta: float
    length_scale: float
    nugget: float = 1e-10

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean length")
        if np.abs(cov - cov.T).max() > 1e-12 * max(np.abs(cov).max(), 1.0):
            raise ValueError("covariance must be symmetric")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.length_scale <= 0.0:
            raise ValueError("length_scale must be positive")
        mean.setflags(write=False)
        cov = np.ascontiguousarray(cov)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def n(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Hyperparameters:
    """Method hyperparameters: dataset variances, QoI noise variance,
    kernel length scale and relative jitter."""

    sigma1_sq: float = 1e-2
    sigma2_sq: float = 1e-2
    tau_sq: float = 1e-6
    length_scale: float = 1e-4
    nugget: float = 1e-10

    def __post_init__(self):
        if self.sigma1_sq < 0 or self.sigma2_sq < 0 or self.nugget < 0:
            raise ValueError("variances and nugget must be nonnegative")
        if self.tau_sq <= 0:
            raise ValueError("tau_sq must be positive")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")

    def replace(self, **kwargs) -> "Hyperparameters":
        d = self.as_dict()
        d.update(kwargs)
        return Hyperparameters(**d)

    def as_dict(self) -> dict:
        return {"sigma1_sq": self.sigma1_sq, "sigma2_sq": self.sigma2_sq,
                "tau_sq": self.tau_sq, "length_scale": self.length_scale,
                "nugget": self.nugget}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        known = {k: float(v) for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def from_file(cls, path) -> "Hyperparameters":
        """Read from a JSON or TOML file, using the ``hyperparameters``
        block when present."""
        path = Path(path)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path) as f:
                data = json.load(f)
        return cls.from_dict(data.get("hyperparameters", data))


def estimate_theta(mu1, mu2, op: OutputOperator, z) -> float:
    """Fusion weight minimizing the QoI misfit of the convex combination.

    With a = H.T mu1 + offset and b = H.T mu2 + offset, the misfit
    ||theta*a + (1-theta)*b - z||^2 is quadratic in theta; the minimizer
    <a-b, z-b>/||a-b||^2 is clamped to [0, 1]. Degenerate a == b returns 0.5.
    """
    mu1 = np.asarray(mu1, dtype=float).ravel()
    mu2 = np.asarray(mu2, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if mu1.shape != mu2.shape or mu1.shape[0] != op.n:
        raise ValueError("field lengths do not match the operator")
    if z.shape[0] != op.m:
        raise ValueError("measurement length does not match the operator")
    a = op.matrix.T @ mu1 + op.offset
    b = op.matrix.T @ mu2 + op.offset
    d = a - b
    denom = float(d @ d)
    if denom < 1e-14:
        return 0.5
    theta = float(d @ (z - b)) / denom
    return min(1.0, max(0.0, theta))


def fuse_prior_mean(mu1, mu2, theta: float) -> np.ndarray:
    """Convex combination theta*mu1 + (1-theta)*mu2."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    mu1 = np.asarray(mu1, dtype=float).ravel()
    mu2 = np.asarray(mu2, dtype=float).ravel()
    if mu1.shape != mu2.shape:
        raise ValueError("field lengths differ")
    return theta * mu1 + (1.0 - theta) * mu2


def combined_variance(theta: float, sigma1_sq: float, sigma2_sq: float) -> float:
    """Variance of the convex combination of two independent fields."""
    if sigma1_sq < 0.0 or sigma2_sq < 0.0:
        raise ValueError("variances must be nonnegative")
    return theta ** 2 * sigma1_sq + (1.0 - theta) ** 2 * sigma2_sq


def prior_covariance(grid: SurfaceGrid, sigma_sq: float, length_scale: float,
                     nugget: float = 1e-10) -> np.ndarray:
    """Squared-exponential covariance over cell centers.

    Sigma_ij = sigma_sq * exp(-||x_i - x_j||^2 / (2 * length_scale^2)),
    with ``nugget * sigma_sq`` added on the diagonal for factorizability.
    """
    if length_scale <= 0.0:
        raise ValueError("length_scale must be positive")
    if sigma_sq <= 0.0:
        raise ValueError("sigma_sq must be positive")
    x = grid.cell_centers
    d2 = cdist(x, x, "sqeuclidean")
    cov = sigma_sq * np.exp(-d2 / (2.0 * length_scale ** 2))
    cov[np.diag_indices_from(cov)] += nugget * sigma_sq
    # symmetrize away cdist rounding so downstream checks see an exact match
    cov = 0.5 * (cov + cov.T)
    return cov


def cholesky_lower(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising NumericalError with advice on failure."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "covariance factorization failed; increase the nugget"
        ) from exc


def sample_prior(spec: PriorSpec, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` fields from the prior; deterministic given ``seed``."""
    if count < 1:
        raise ValueError("count must be positive")
    chol = cholesky_lower(spec.covariance)
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((count, spec.n))
    return spec.mean[None, :] + xi @ chol.T


def build_prior(mu1, mu2, op: OutputOperator, z, grid: SurfaceGrid,
                hyper: Hyperparameters,
                theta_override: float | None = None) -> PriorSpec:
    """Assemble the full prior: weight, fused mean, combined variance and
    spatial covariance."""
    if theta_override is None:
        theta = estimate_theta(mu1, mu2, op, z)
    else:
        if not 0.0 <= theta_override <= 1.0:
            raise ValueError("theta override must lie in [0, 1]")
        theta = float(theta_override)
    mean = fuse_prior_mean(mu1, mu2, theta)
    sigma_sq = combined_variance(theta, hyper.sigma1_sq, hyper.sigma2_sq)
    if sigma_sq <= 0.0:
        raise ValueError("combined variance is zero; dataset variances too small")
    cov = prior_covariance(grid, sigma_sq, hyper.length_scale, hyper.nugget)
    return PriorSpec(mean, cov, theta, hyper.length_scale, hyper.nugget)
