"""Synthetic ground truth for exercising the fusion machinery end to end.

Real campaign data has no knowable true field, so this module manufactures
one: a smooth transonic-style pressure-coefficient family (stagnation bump,
chordwise loading, tanh shock plateau on the suction side) whose shape
responds smoothly to the flight condition. From the truth it derives a
biased "simulation" twin (smooth correlated bias, optional shock shift),
a noisy gappy "measurement" twin, and noisy QoI measurements. Every draw is
reproducible from the scenario seed and recorded in the bundle provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import (OutputOperator, SurfaceGrid, apply_forward,
                       build_airfoil_grid, build_output_operator,
                       impute_missing, naca4_surfaces, read_field_csv,
                       read_grid_csv, write_field_csv, write_grid_csv)
from .prior import FlowCondition
from .cpod import SnapshotSet

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "ScenarioSpec",
    "ScenarioBundle",
    "build_scenario_grid",
    "generate_truth",
    "bias_simulation",
    "corrupt_measurement",
    "measure_qois",
    "build_bundle",
    "write_bundle",
    "read_bundle",
    "rae_table_conditions",
    "latin_hypercube",
    "maximin_lhs",
    "condition_spec",
    "generate_campaign",
    "generate_snapshot_bank",
    "default_scenario",
    "harsh_scenario",
    "RAE_LHS_BOUNDS",
]

#: (Mach, Reynolds, alpha) box spanning the tabulated RAE conditions
RAE_LHS_BOUNDS = ((0.60, 0.75), (2.7, 6.5), (-2.5, 3.3))


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete recipe for one synthetic fusion scenario."""

    n: int = 128
    naca: str = "2412"
    curve_points: int = 2000
    condition: FlowCondition = field(
        default_factory=lambda: FlowCondition(0.676, 5.7, 2.40))
    # truth shape
    baseline_amplitude: float = 1.0
    shock_position: float = 0.55
    shock_width: float = 0.04
    shock_strength: float = 0.5
    # corruption
    noise_std: float = 0.03
    gap_fraction: float = 0.02
    bias_amplitude: float = 0.05
    bias_length_scale: float = 0.30
    bias_shock_shift: float = 0.025
    # QoI measurement noise variance
    tau_sq: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.shock_position < 1.0:
            raise ValueError("shock_position must lie in (0, 1)")
        if self.shock_width <= 0.0:
            raise ValueError("shock_width must be positive")
        if self.noise_std < 0.0 or self.bias_amplitude < 0.0 or self.tau_sq < 0.0:
            raise ValueError("noise levels must be nonnegative")
        if not 0.0 <= self.gap_fraction <= 0.5:
            raise ValueError("gap_fraction must lie in [0, 0.5]")
        if self.n < 8:
            raise ValueError("scenario grid needs at least 8 cells")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["condition"] = self.condition.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        cond = d.pop("condition", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        if cond is not None:
            d["condition"] = FlowCondition(**cond)
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ScenarioSpec":
        path = Path(path)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path) as f:
                data = json.load(f)
        return cls.from_dict(data.get("scenario", data))


@dataclass(frozen=True)
class ScenarioBundle:
    """Everything one fusion run consumes, plus the truth it is judged by."""

    spec: ScenarioSpec
    grid: SurfaceGrid
    operator: OutputOperator
    y_true: np.ndarray
    mu_cfd: np.ndarray
    mu_wt: np.ndarray          # with NaN gaps
    mu_wt_filled: np.ndarray
    z_noiseless: np.ndarray
    z_measured: np.ndarray
    provenance: dict

    def __post_init__(self):
        if not np.array_equal(self.z_noiseless,
                              apply_forward(self.operator, self.y_true)):
            raise ValueError("z_noiseless is not the forward model of y_true")


def _child_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def build_scenario_grid(spec: ScenarioSpec) -> SurfaceGrid:
    upper, lower = naca4_surfaces(spec.naca, spec.curve_points)
    return build_airfoil_grid(upper, lower, spec.n)


def generate_truth(spec: ScenarioSpec, grid: SurfaceGrid | None = None,
                   shock_shift: float = 0.0) -> np.ndarray:
    """Smooth analytic pressure-coefficient field for the spec's condition.

    Upper-surface cells carry a suction plateau that terminates in a tanh
    shock; loading and shock position respond smoothly to Mach, Reynolds
    number and angle of attack so that snapshot banks span a coherent
    family. Deterministic in the spec.
    """
    if grid is None:
        grid = build_scenario_grid(spec)
    x = grid.cell_centers[:, 0]
    upper = grid.unit_normals[:, -1] >= 0.0

    cond = spec.condition
    lift = spec.baseline_amplitude * (0.15 + 0.10 * cond.alpha_deg) \
        * (1.0 + 0.6 * (cond.mach - 0.7)) * (1.0 + 0.02 * (cond.reynolds - 5.0))
    xs = float(np.clip(spec.shock_position + shock_shift
                       + 0.35 * (cond.mach - 0.7) + 0.01 * cond.alpha_deg,
                       0.12, 0.88))
    strength = spec.shock_strength * max(0.0, 1.0 + 2.0 * (cond.mach - 0.7))

    stagnation = np.exp(-((x / 0.05) ** 2))
    loading = 4.0 * x * (1.0 - x)
    # plateau rises just aft of the nose and recovers through the shock
    plateau = 0.5 * (np.tanh((x - 0.04) / 0.02) - np.tanh((x - xs) / spec.shock_width))
    # suction flips to the lower surface when the section unloads
    lower_gain = 1.0 / (1.0 + np.exp(lift / 0.04))
    xs_low = float(np.clip(0.95 * xs - 0.04 * cond.alpha_deg, 0.12, 0.88))
    plateau_low = 0.5 * (np.tanh((x - 0.04) / 0.02)
                         - np.tanh((x - xs_low) / spec.shock_width))

    cp = (stagnation - 0.35 * lift * loading
          - lower_gain * strength * plateau_low)
    cp[upper] = stagnation[upper] - lift * loading[upper] - strength * plateau[upper]
    return cp


def bias_simulation(y_true, spec: ScenarioSpec, grid: SurfaceGrid,
                    seed: int) -> np.ndarray:
    """Biased simulation twin: truth plus a squared-exponential-filtered
    noise field (rms-scaled to ``bias_amplitude``) and, when configured,
    a shock displaced by ``bias_shock_shift``."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(grid.n)
    out = y_true.copy()
    if spec.bias_amplitude > 0.0:
        d2 = cdist(grid.cell_centers, grid.cell_centers, "sqeuclidean")
        smooth = np.exp(-d2 / (2.0 * spec.bias_length_scale ** 2)) @ w
        rms = float(np.sqrt(np.mean(smooth ** 2)))
        if rms > 0.0:
            out += spec.bias_amplitude * smooth / rms
    if spec.bias_shock_shift != 0.0:
        shifted = generate_truth(spec, grid, shock_shift=spec.bias_shock_shift)
        out += shifted - y_true
    return out


def corrupt_measurement(y_true, spec: ScenarioSpec, seed: int) -> np.ndarray:
    """Measurement twin: i.i.d. Gaussian noise plus one contiguous NaN gap
    of ``gap_fraction`` of the cells (position drawn from the seed)."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, spec.noise_std, y_true.shape[0]) \
        if spec.noise_std > 0.0 else np.zeros_like(y_true)
    out = y_true + noise
    gap = int(round(spec.gap_fraction * y_true.shape[0]))
    if gap > 0:
        start = int(rng.integers(0, y_true.shape[0]))
        idx = (start + np.arange(gap)) % y_true.shape[0]
        out[idx] = np.nan
    return out


def measure_qois(y_true, op: OutputOperator, tau_sq: float, seed: int):
    """Noiseless and noisy QoI measurements of the true field."""
    if tau_sq < 0.0:
        raise ValueError("tau_sq must be nonnegative")
    z_noiseless = apply_forward(op, y_true)
    rng = np.random.default_rng(seed)
    z_measured = z_noiseless + rng.normal(0.0, np.sqrt(tau_sq), op.m)
    return z_measured, z_noiseless


def build_bundle(spec: ScenarioSpec) -> ScenarioBundle:
    """Generate the full scenario: grid, operator, truth, corrupted twins
    and QoI measurements, with all draws recorded."""
    grid = build_scenario_grid(spec)
    op = build_output_operator(grid, spec.condition.alpha_rad)
    y_true = generate_truth(spec, grid)

    bias_seed = _child_seed(spec.seed, 0)
    noise_seed = _child_seed(spec.seed, 1)
    qoi_seed = _child_seed(spec.seed, 2)

    mu_cfd = bias_simulation(y_true, spec, grid, bias_seed)
    mu_wt = corrupt_measurement(y_true, spec, noise_seed)
    mu_wt_filled = impute_missing(mu_wt, grid)
    z_measured, z_noiseless = measure_qois(y_true, op, spec.tau_sq, qoi_seed)

    gap_cells = np.flatnonzero(np.isnan(mu_wt))
    present = ~np.isnan(mu_wt)
    provenance = {
        "seed": spec.seed,
        "bias_seed": bias_seed,
        "noise_seed": noise_seed,
        "qoi_seed": qoi_seed,
        "bias_field": (mu_cfd - y_true).tolist(),
        "measurement_noise": np.where(present, mu_wt - y_true, np.nan).tolist(),
        "gap_cells": gap_cells.tolist(),
        "qoi_noise": (z_measured - z_noiseless).tolist(),
    }
    return ScenarioBundle(spec=spec, grid=grid, operator=op, y_true=y_true,
                          mu_cfd=mu_cfd, mu_wt=mu_wt,
                          mu_wt_filled=mu_wt_filled,
                          z_noiseless=z_noiseless, z_measured=z_measured,
                          provenance=provenance)


def rae_table_conditions() -> tuple[FlowCondition, ...]:
    """The eleven tabulated transonic test conditions (Mach, Re in millions,
    alpha in degrees)."""
    rows = [
        (0.676, 5.7, 2.40), (0.676, 5.7, -2.18), (0.600, 6.3, 2.57),
        (0.725, 6.5, 2.92), (0.725, 6.5, 2.55), (0.728, 6.5, 3.22),
        (0.730, 6.5, 3.19), (0.750, 6.2, 3.19), (0.730, 2.7, 3.19),
        (0.745, 2.7, 3.19), (0.740, 2.7, 3.19),
    ]
    return tuple(FlowCondition(*r) for r in rows)


# ---------------------------------------------------------------------------
# space-filling designs


def latin_hypercube(count: int, bounds, rng) -> np.ndarray:
    """Stratified uniform design: one sample per axis bin in every dimension."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    if count < 1:
        raise ValueError("count must be positive")
    dims = bounds.shape[0]
    unit = np.empty((count, dims))
    for j in range(dims):
        unit[:, j] = (rng.permutation(count) + rng.uniform(size=count)) / count
    return bounds[:, 0] + unit * (bounds[:, 1] - bounds[:, 0])


def _min_pairwise_distance(pts: np.ndarray) -> float:
    d = cdist(pts, pts)
    d[np.diag_indices_from(d)] = np.inf
    return float(d.min())


def maximin_lhs(count: int, bounds, rng, candidates: int = 100) -> np.ndarray:
    """Best of ``candidates`` random Latin hypercubes by the maximin
    criterion (largest minimum pairwise distance, scored in the unit cube)."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    span = bounds[:, 1] - bounds[:, 0]
    best, best_score = None, -np.inf
    for _ in range(candidates):
        pts = latin_hypercube(count, bounds, rng)
        score = _min_pairwise_distance((pts - bounds[:, 0]) / span)
        if score > best_score:
            best, best_score = pts, score
    return best


def condition_spec(base_spec: ScenarioSpec, condition: FlowCondition,
                   index: int, seed: int | None = None) -> ScenarioSpec:
    """Per-condition scenario within a campaign: same recipe, a child seed
    derived from the campaign seed and the condition index."""
    root = base_spec.seed if seed is None else seed
    return replace(base_spec, condition=condition,
                   seed=_child_seed(root, index))


def generate_campaign(base_spec: ScenarioSpec, conditions,
                      seed: int | None = None) -> tuple[ScenarioBundle, ...]:
    """One bundle per condition, each with its own derived seed."""
    return tuple(build_bundle(condition_spec(base_spec, c, i, seed))
                 for i, c in enumerate(conditions))


def generate_snapshot_bank(base_spec: ScenarioSpec, conditions,
                           fidelities=("simulation", "measurement"),
                           lhs_size: int = 0, lhs_bounds=RAE_LHS_BOUNDS,
                           seed: int | None = None,
                           grid: SurfaceGrid | None = None) -> SnapshotSet:
    """Stack synthetic snapshots over the given conditions and fidelities,
    optionally augmented with ``lhs_size`` extra simulation snapshots at
    maximin-Latin-hypercube conditions in (Mach, Re, alpha).

    ``fidelities`` is either one tuple applied to every condition or a
    per-condition list of tuples. Columns follow the campaign seed
    convention, so they coincide exactly with the fields of the bundle
    built from ``condition_spec(base_spec, c, i, seed)``; a fusion target
    drawn from the same campaign has its own data pair in the bank.
    Measurement snapshots are gap-imputed so the bank is NaN-free.
    """
    conditions = list(conditions)
    if not conditions:
        raise ValueError("need at least one condition")
    if fidelities and isinstance(fidelities[0], str):
        per_condition = [tuple(fidelities)] * len(conditions)
    else:
        per_condition = [tuple(f) for f in fidelities]
        if len(per_condition) != len(conditions):
            raise ValueError("per-condition fidelity list length mismatch")

    if grid is None:
        grid = build_scenario_grid(base_spec)
    root = base_spec.seed if seed is None else seed
    columns, conds, fids = [], [], []
    for i, (cond, flags) in enumerate(zip(conditions, per_condition)):
        spec_i = condition_spec(base_spec, cond, i, seed)
        y = generate_truth(spec_i, grid)
        for fid in flags:
            if fid == "simulation":
                col = bias_simulation(y, spec_i, grid, _child_seed(spec_i.seed, 0))
            elif fid == "measurement":
                raw = corrupt_measurement(y, spec_i, _child_seed(spec_i.seed, 1))
                col = impute_missing(raw, grid)
            else:
                raise ValueError(f"unknown fidelity {fid!r}")
            columns.append(col)
            conds.append(cond)
            fids.append(fid)

    if lhs_size > 0:
        rng = np.random.default_rng(_child_seed(root, 10_000))
        points = maximin_lhs(lhs_size, lhs_bounds, rng)
        for j, (mach, re, alpha) in enumerate(points):
            cond = FlowCondition(float(mach), float(re), float(alpha))
            spec_j = replace(base_spec, condition=cond)
            y = generate_truth(spec_j, grid)
            columns.append(bias_simulation(y, spec_j, grid,
                                           _child_seed(root, 20_000 + j)))
            conds.append(cond)
            fids.append("simulation")

    return SnapshotSet(np.column_stack(columns), tuple(conds), tuple(fids))


# ---------------------------------------------------------------------------
# presets


def default_scenario(condition: FlowCondition | None = None,
                     seed: int = 2, n: int = 128) -> ScenarioSpec:
    """Stock scenario: moderate measurement noise and simulation bias."""
    if condition is None:
        condition = rae_table_conditions()[0]
    return ScenarioSpec(n=n, condition=condition, seed=seed)


def harsh_scenario(condition: FlowCondition | None = None,
                   seed: int = 2, n: int = 128) -> ScenarioSpec:
    """Worst-case scenario: a strongly displaced simulation shock and noisy
    QoI measurements, so no blend of the inputs can match the measured QoIs
    and the constrained fit has to work hard."""
    if condition is None:
        condition = rae_table_conditions()[1]
    return ScenarioSpec(n=n, condition=condition, seed=seed,
                        noise_std=0.015, gap_fraction=0.05,
                        bias_amplitude=0.02, bias_shock_shift=0.08,
                        tau_sq=1e-2)


# ---------------------------------------------------------------------------
# bundle files


def write_bundle(bundle: ScenarioBundle, directory) -> None:
    """Directory layout: grid.csv, the four field CSVs and manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_grid_csv(bundle.grid, directory / "grid.csv")
    write_field_csv(bundle.y_true, directory / "y_true.csv")
    write_field_csv(bundle.mu_cfd, directory / "mu_cfd.csv")
    write_field_csv(bundle.mu_wt, directory / "mu_wt.csv")
    write_field_csv(bundle.mu_wt_filled, directory / "mu_wt_filled.csv")
    manifest = {
        "scenario": bundle.spec.as_dict(),
        "qoi_names": list(bundle.operator.qoi_names),
        "z_noiseless": bundle.z_noiseless.tolist(),
        "z_measured": bundle.z_measured.tolist(),
        "provenance": bundle.provenance,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_bundle(directory) -> ScenarioBundle:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    spec = ScenarioSpec.from_dict(manifest["scenario"])
    grid = read_grid_csv(directory / "grid.csv")
    op = build_output_operator(grid, spec.condition.alpha_rad)
    return ScenarioBundle(
        spec=spec, grid=grid, operator=op,
        y_true=read_field_csv(directory / "y_true.csv"),
        mu_cfd=read_field_csv(directory / "mu_cfd.csv"),
        mu_wt=read_field_csv(directory / "mu_wt.csv"),
        mu_wt_filled=read_field_csv(directory / "mu_wt_filled.csv"),
        z_noiseless=np.array(manifest["z_noiseless"], dtype=float),
        z_measured=np.array(manifest["z_measured"], dtype=float),
        provenance=manifest["provenance"],
    )
