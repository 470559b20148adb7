"""Shared fixtures: grids, scenario bundles and snapshot banks reused
across the suite (session-scoped where construction is expensive)."""

from __future__ import annotations

import numpy as np
import pytest

from fieldfuse.geometry import SurfaceGrid, build_airfoil_grid, naca4_surfaces
from fieldfuse.synth import (condition_spec, build_bundle, default_scenario,
                             generate_snapshot_bank, harsh_scenario,
                             rae_table_conditions)


def circle_surfaces(n_points: int = 100_001, radius: float = 1.0):
    """Dense upper/lower halves of a circle, ordered LE to TE."""
    th = np.linspace(0.0, np.pi, n_points)[::-1]
    upper = np.column_stack([radius * np.cos(th), radius * np.sin(th)])
    lower = np.column_stack([radius * np.cos(th), -radius * np.sin(th)])
    return upper, lower


def line_grid(n: int, length: float = 1.0) -> SurfaceGrid:
    """Open 1D chord grid (cells along a line); not a closed surface."""
    centers = np.column_stack([(np.arange(n) + 0.5) / n * length, np.zeros(n)])
    normals = np.column_stack([np.zeros(n), np.ones(n)])
    measures = np.full(n, length / n)
    return SurfaceGrid(centers, measures, normals)


@pytest.fixture(scope="session")
def circle_grid():
    upper, lower = circle_surfaces()
    return build_airfoil_grid(upper, lower, 128, ref_point=(0.0, 0.0))


@pytest.fixture(scope="session")
def naca_grid():
    upper, lower = naca4_surfaces("2412", 2000)
    return build_airfoil_grid(upper, lower, 128)


@pytest.fixture(scope="session")
def stock_bundle():
    """Stock scenario target: first tabulated condition of the campaign."""
    base = default_scenario()
    return build_bundle(condition_spec(base, rae_table_conditions()[0], 0))


@pytest.fixture(scope="session")
def stock_bank91(stock_bundle):
    """Paper-style rich bank: 11 measurement snapshots + 80 LHS simulations."""
    base = default_scenario()
    return generate_snapshot_bank(base, rae_table_conditions(),
                                  fidelities=("measurement",), lhs_size=80,
                                  grid=stock_bundle.grid)


@pytest.fixture(scope="session")
def harsh_bundle():
    """Worst-case target: the negative-incidence condition of the campaign."""
    base = harsh_scenario()
    return build_bundle(condition_spec(base, rae_table_conditions()[1], 1))


@pytest.fixture(scope="session")
def harsh_banks(harsh_bundle):
    base = harsh_scenario()
    conds = rae_table_conditions()
    bank22 = generate_snapshot_bank(base, conds,
                                    fidelities=("simulation", "measurement"),
                                    grid=harsh_bundle.grid)
    bank91 = generate_snapshot_bank(base, conds, fidelities=("measurement",),
                                    lhs_size=80, grid=harsh_bundle.grid)
    return bank22, bank91
