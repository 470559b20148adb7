"""Constrained-POD fusion: search the snapshot subspace for the field that
matches the measured QoIs exactly.

A truncated POD basis is extracted from the snapshot bank; the fused field
is the least-squares fit to the current guess within that subspace subject
to the hard equality constraint ``H.T u = z`` (a saddle-point KKT solve).
The accepted iterate enriches the basis and the loop repeats until the cost
stabilizes. Spread across randomized initial guesses yields Student-t
confidence bounds.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.stats import t as student_t

from .errors import ConstraintInfeasibleError, DataError, NumericalError
from .geometry import OutputOperator, read_field_csv, write_field_csv
from .prior import FlowCondition, FIDELITIES

__all__ = [
    "SnapshotSet",
    "PodBasis",
    "CpodResult",
    "CpodEnsemble",
    "compute_pod",
    "truncate_rank",
    "truncate_basis",
    "solve_kkt",
    "run_cpod",
    "cpod_ensemble",
    "write_snapshot_bank",
    "read_snapshot_bank",
    "write_ensemble_csv",
]

ENERGY_TARGET = 0.99


@dataclass(frozen=True)
class SnapshotSet:
    """Stacked field snapshots (one column each) with their provenance."""

    U: np.ndarray
    conditions: tuple
    fidelities: tuple[str, ...]

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if U.shape[1] < 2:
            raise ValueError("need at least 2 snapshots")
        if np.isnan(U).any():
            raise DataError("snapshot matrix contains NaN; impute gaps first")
        if len(self.conditions) != U.shape[1] or len(self.fidelities) != U.shape[1]:
            raise ValueError("conditions/fidelities must have one entry per snapshot")
        for f in self.fidelities:
            if f not in FIDELITIES:
                raise ValueError(f"unknown fidelity {f!r}")
        U = np.ascontiguousarray(U)
        U.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "fidelities", tuple(self.fidelities))

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def q(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True)
class PodBasis:
    """Orthonormal modes from the thin SVD of a snapshot matrix."""

    modes: np.ndarray
    singular_values: np.ndarray
    k: int
    energy_fraction: float

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.modes, dtype=float))
        d = np.asarray(self.singular_values, dtype=float).ravel()
        if phi.shape[1] != self.k:
            raise ValueError("mode count does not match k")
        if np.any(d < 0.0) or np.any(np.diff(d) > 1e-12 * max(d[0] if d.size else 0.0, 1.0)):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        gram = phi.T @ phi
        if np.abs(gram - np.eye(self.k)).max() > 1e-10:
            raise NumericalError("POD modes are not orthonormal")
        phi = np.ascontiguousarray(phi)
        phi.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "modes", phi)
        object.__setattr__(self, "singular_values", d)


@dataclass(frozen=True)
class CpodResult:
    """Outcome of one constrained-POD run."""

    u_fused: np.ndarray
    coefficients: np.ndarray
    multipliers: np.ndarray
    cost_history: tuple[float, ...]
    iterations: int
    converged: bool
    constraint_residual: float
    rank_history: tuple[int, ...]
    basis_orthonormality_error: float


@dataclass(frozen=True)
class CpodEnsemble:
    """Replicate statistics of the fused field over randomized initial
    guesses, with Student-t bounds on the replicate mean."""

    mean: np.ndarray
    cov_diag: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    T: int
    dof: int
    t_value: float
    cost_histories: tuple
    failures: tuple

    def __post_init__(self):
        if np.any(np.asarray(self.cov_diag) < 0.0):
            raise ValueError("ensemble variances must be nonnegative")
        if self.dof != self.T - 1 or self.dof < 1:
            raise ValueError("need dof = T - 1 >= 1")


# ---------------------------------------------------------------------------
# POD


def compute_pod(snapshots: SnapshotSet) -> PodBasis:
    """Thin SVD of the snapshot matrix; all modes retained."""
    return _pod_of_matrix(snapshots.U)


def _pod_of_matrix(U: np.ndarray) -> PodBasis:
    try:
        phi, d, _ = np.linalg.svd(U, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("SVD of the snapshot matrix did not converge") from exc
    return PodBasis(phi, d, k=phi.shape[1], energy_fraction=1.0)


def truncate_rank(singular_values, target: float = ENERGY_TARGET) -> int:
    """Smallest k whose cumulative singular-value fraction reaches the
    target (first powers, not squares)."""
    d = np.asarray(singular_values, dtype=float).ravel()
    if d.size == 0 or np.any(d < 0.0):
        raise ValueError("singular values must be nonnegative and nonempty")
    if np.any(np.diff(d) > 1e-12 * max(d[0], 1.0)):
        raise ValueError("singular values must be nonincreasing")
    total = d.sum()
    if total <= 0.0:
        raise DataError("all singular values are zero")
    if not 0.0 < target <= 1.0:
        raise ValueError("target fraction must lie in (0, 1]")
    fractions = np.cumsum(d) / total
    return int(np.argmax(fractions >= target - 1e-12)) + 1


def truncate_basis(basis: PodBasis, target: float = ENERGY_TARGET) -> PodBasis:
    k = truncate_rank(basis.singular_values, target)
    d = basis.singular_values
    return PodBasis(basis.modes[:, :k], d, k=k,
                    energy_fraction=float(d[:k].sum() / d.sum()))


# ---------------------------------------------------------------------------
# constrained least squares


def solve_kkt(phi_k: np.ndarray, op: OutputOperator, z, u_guess):
    """Solve min ||phi_k a - u_guess||^2 subject to H.T phi_k a = z via the
    (k+m) saddle system [[I, phi.T H], [H.T phi, 0]] [a; lam] = [phi.T u; z].

    Requires k >= m and full row rank of the constraint block H.T phi_k
    (the reduced-basis version of the operator full-rank condition).
    """
    phi_k = np.atleast_2d(np.asarray(phi_k, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    u_guess = np.asarray(u_guess, dtype=float).ravel()
    n, k = phi_k.shape
    m = op.m
    if k < m:
        raise ValueError(f"basis rank k={k} must be at least m={m}")
    if u_guess.shape[0] != n or op.n != n or z.shape[0] != m:
        raise ValueError("inconsistent dimensions in KKT solve")

    constraint = op.matrix.T @ phi_k  # m x k
    sv = np.linalg.svd(constraint, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0] or sv[0] == 0.0:
        u_null, _, _ = np.linalg.svd(constraint)
        offending = op.qoi_names[int(np.argmax(np.abs(u_null[:, -1])))]
        raise ConstraintInfeasibleError(
            f"constraint block is rank deficient; QoI {offending!r} is a linear "
            "combination of the others in the truncated basis"
        )

    kkt = np.zeros((k + m, k + m))
    kkt[:k, :k] = np.eye(k)
    kkt[:k, k:] = constraint.T
    kkt[k:, :k] = constraint
    rhs = np.concatenate([phi_k.T @ u_guess, z])

    lu = lu_factor(kkt)
    sol = lu_solve(lu, rhs)
    norm_rhs = np.linalg.norm(rhs)
    for _ in range(2):
        residual = rhs - kkt @ sol
        if np.linalg.norm(residual) <= 1e-10 * max(norm_rhs, 1e-300):
            break
        sol = sol + lu_solve(lu, residual)
    else:
        if np.linalg.norm(rhs - kkt @ sol) > 1e-10 * max(norm_rhs, 1e-300):
            raise NumericalError("KKT solve failed to reach residual target")
    return sol[:k], sol[k:]


def run_cpod(snapshots: SnapshotSet, u_cfd, u_wt, z, op: OutputOperator,
             theta_init: float, c: int = 5, eps_c: float = 1e-6,
             max_iter: int = 50, energy_target: float = ENERGY_TARGET) -> CpodResult:
    """Iterative constrained-POD fusion.

    Starts from the blend ``theta_init * u_cfd + (1 - theta_init) * u_wt``;
    each pass solves the constrained fit in the current truncated basis,
    accepts the fitted field, enriches the basis with it (fresh thin SVD of
    [U, u]) and re-truncates. Stops when the dispersion of the cost over the
    last ``c`` passes falls to ``eps_c``, or at ``max_iter``.
    """
    if not 0.0 <= theta_init <= 1.0:
        raise ValueError("theta_init must lie in [0, 1]")
    if c < 1 or max_iter < 1:
        raise ValueError("c and max_iter must be positive")
    u_cfd = np.asarray(u_cfd, dtype=float).ravel()
    u_wt = np.asarray(u_wt, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if u_cfd.shape[0] != snapshots.n or u_wt.shape[0] != snapshots.n:
        raise ValueError("target fields do not match the snapshot dimension")
    if z.shape[0] != op.m or op.n != snapshots.n:
        raise ValueError("measurements/operator inconsistent with snapshots")
    z_eff = z - op.offset

    u = theta_init * u_cfd + (1.0 - theta_init) * u_wt
    basis = _truncated(_pod_of_matrix(snapshots.U), energy_target, op.m)

    cost_history: list[float] = []
    rank_history: list[int] = []
    orth_err = 0.0
    converged = False
    a = lam = None
    for _ in range(max_iter):
        a, lam = solve_kkt(basis.modes, op, z_eff, u)
        u_new = basis.modes @ a
        cost = (0.5 * float((u_new - u) @ (u_new - u))
                + float(lam @ (op.matrix.T @ u_new - z_eff)))
        if not np.isfinite(cost):
            raise NumericalError("cost function became non-finite")
        cost_history.append(cost)
        rank_history.append(basis.k)
        u = u_new

        basis = _truncated(_pod_of_matrix(np.column_stack([snapshots.U, u])),
                           energy_target, op.m)
        gram = basis.modes.T @ basis.modes
        orth_err = max(orth_err, float(np.abs(gram - np.eye(basis.k)).max()))

        if len(cost_history) >= c:
            window = np.array(cost_history[-c:])
            delta = float(np.mean(window ** 2) - np.mean(window) ** 2)
            if delta <= eps_c:
                converged = True
                break

    residual = float(np.linalg.norm(op.matrix.T @ u - z_eff))
    return CpodResult(u_fused=u, coefficients=a, multipliers=lam,
                      cost_history=tuple(cost_history),
                      iterations=len(cost_history), converged=converged,
                      constraint_residual=residual,
                      rank_history=tuple(rank_history),
                      basis_orthonormality_error=orth_err)


def _truncated(basis: PodBasis, target: float, m: int) -> PodBasis:
    """Energy truncation, never dropping below the m modes the constraint
    solve needs."""
    k = max(truncate_rank(basis.singular_values, target), m)
    k = min(k, basis.modes.shape[1])
    if k < m:
        raise ConstraintInfeasibleError(
            f"snapshot bank provides only {k} modes but {m} constraints"
        )
    d = basis.singular_values
    return PodBasis(basis.modes[:, :k], d, k=k,
                    energy_fraction=float(d[:k].sum() / d.sum()))


def cpod_ensemble(snapshots: SnapshotSet, u_cfd, u_wt, z, op: OutputOperator,
                  T: int = 1000, beta: float = 0.05, seed: int = 0,
                  c: int = 5, eps_c: float = 1e-6, max_iter: int = 50,
                  energy_target: float = ENERGY_TARGET,
                  max_workers: int = 1) -> CpodEnsemble:
    """Replicate run_cpod with theta_init ~ U(0, 1) and build Student-t
    bounds mean +- t_{1-beta/2, T-1} * std / sqrt(T).

    Replicate i draws its theta from a generator seeded with ``seed + i``,
    so results are independent of execution order and worker count. Failed
    replicates are dropped and recorded; T shrinks accordingly.
    """
    if T < 2:
        raise ValueError("need at least T=2 replicates")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie strictly between 0 and 1")
    thetas = [float(np.random.default_rng(seed + i).uniform()) for i in range(T)]

    def one(i: int):
        return run_cpod(snapshots, u_cfd, u_wt, z, op, theta_init=thetas[i],
                        c=c, eps_c=eps_c, max_iter=max_iter,
                        energy_target=energy_target)

    results: list = [None] * T
    failures: list = []
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {i: pool.submit(one, i) for i in range(T)}
        for i, fut in futures.items():
            exc = fut.exception()
            if exc is not None:
                failures.append((i, f"{type(exc).__name__}: {exc}"))
            else:
                results[i] = fut.result()
    else:
        for i in range(T):
            try:
                results[i] = one(i)
            except Exception as exc:
                failures.append((i, f"{type(exc).__name__}: {exc}"))

    kept = [r for r in results if r is not None]
    if not kept:
        raise NumericalError(
            f"every CPOD replicate failed; first failure: {failures[0][1]}")
    t_eff = len(kept)
    if t_eff < 2:
        raise NumericalError("fewer than 2 CPOD replicates succeeded")

    fields = np.stack([r.u_fused for r in kept])
    mean = fields.mean(axis=0)
    var = fields.var(axis=0, ddof=1)
    dof = t_eff - 1
    tq = float(student_t.ppf(1.0 - beta / 2.0, dof))
    half = tq * np.sqrt(var) / np.sqrt(t_eff)
    return CpodEnsemble(mean=mean, cov_diag=var, lower=mean - half,
                        upper=mean + half, T=t_eff, dof=dof, t_value=tq,
                        cost_histories=tuple(r.cost_history for r in kept),
                        failures=tuple(failures))


# ---------------------------------------------------------------------------
# snapshot bank and ensemble files


def write_snapshot_bank(snapshots: SnapshotSet, directory) -> None:
    """Directory layout: one field CSV per snapshot plus manifest.json
    recording condition and fidelity per file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for j in range(snapshots.q):
        name = f"snapshot_{j:04d}.csv"
        write_field_csv(snapshots.U[:, j], directory / name)
        cond = snapshots.conditions[j]
        entries.append({
            "file": name,
            "fidelity": snapshots.fidelities[j],
            "condition": cond.as_dict() if cond is not None else None,
        })
    with open(directory / "manifest.json", "w") as f:
        json.dump({"snapshots": entries}, f, indent=2, sort_keys=True)


def read_snapshot_bank(directory) -> SnapshotSet:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    columns, conditions, fidelities = [], [], []
    for entry in manifest["snapshots"]:
        columns.append(read_field_csv(directory / entry["file"]))
        cond = entry.get("condition")
        conditions.append(FlowCondition(**cond) if cond else None)
        fidelities.append(entry["fidelity"])
    return SnapshotSet(np.column_stack(columns), tuple(conditions),
                       tuple(fidelities))


def write_ensemble_csv(ensemble: CpodEnsemble, path) -> None:
    """Per-cell export: cell_index, mean, std, lower, upper."""
    std = np.sqrt(ensemble.cov_diag)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell_index", "mean", "std", "lower", "upper"])
        for i in range(ensemble.mean.shape[0]):
            w.writerow([i, f"{ensemble.mean[i]:.17g}", f"{std[i]:.17g}",
                        f"{ensemble.lower[i]:.17g}", f"{ensemble.upper[i]:.17g}"])
