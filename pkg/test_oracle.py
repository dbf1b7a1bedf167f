#!/usr/bin/env python3
"""
Tests for the finite-volume reference solver: grid guards, free-space and
manufactured-solution convergence, discrete conservation and the field
comparison.
"""
import math
import sys

import numpy as np
import pytest

from twodisk_errors import ResolutionError, ShapeMismatchError
from twodisk_geometry import TwoDiskConfig
from twodisk_oracle import (
    build_grid,
    cell_balance,
    compare,
    face_fluxes,
    fv_solve,
    manufactured_source,
    observed_order,
    sample_series,
    solve_system,
)
from twodisk_potentials import PiecewiseSource, RadialBump, lower_bound_source, radial_bump_source

MMS_BOX = (-4.0, 4.0, -4.0, 4.0)


def _manufactured(n: int):
    """u* = bump over both inclusions, f = a grad u* on faces, zero Dirichlet data."""
    cfg = TwoDiskConfig(eps=0.4, k1=3.0, k2=0.5)
    exact = RadialBump(complex(0.0, 1.5), 1.5, 1.0)
    grid = build_grid(cfg, MMS_BOX, n)
    solve_system(grid, manufactured_source(grid, exact.gradient))
    return grid, exact


def test_zero_source_gives_zero():
    cfg = TwoDiskConfig(eps=0.4, k1=5.0, k2=5.0)
    grid = fv_solve(cfg, PiecewiseSource(), box=MMS_BOX, n=128)
    assert np.all(grid.solution == 0.0)
    assert grid.iterations == 0


def test_resolution_guards():
    """Coarse grids, unresolved gaps and tight boxes are rejected"""
    print("\n" + "=" * 80)
    print("Testing Grid Guards")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    with pytest.raises(ResolutionError):
        build_grid(cfg, n=32)
    print("✓ n < 64 rejected")
    with pytest.raises(ResolutionError):
        build_grid(TwoDiskConfig(eps=0.01), n=256)
    print("✓ unresolved gap rejected")
    with pytest.raises(ResolutionError):
        build_grid(cfg, box=(-2.5, 2.5, -2.5, 2.5), n=400)
    print("✓ disks too close to the box edge rejected")
    with pytest.raises(ResolutionError):
        build_grid(cfg, n=600, src=lower_bound_source(cfg, center=(-3.7, 0.0)))
    print("✓ source too close to the box edge rejected")


def test_unknown_boundary_condition():
    cfg = TwoDiskConfig(eps=0.4)
    with pytest.raises(ValueError):
        fv_solve(cfg, PiecewiseSource(), box=MMS_BOX, n=128, bc="neumann")


def test_face_coefficients_are_harmonic_means():
    cfg = TwoDiskConfig(eps=0.4, k1=9.0, k2=1.0)
    grid = build_grid(cfg, MMS_BOX, 128)
    a, b = grid.coefficient[:, :-1], grid.coefficient[:, 1:]
    assert np.allclose(grid.face_x[:, 1:-1], 2.0 * a * b / (a + b))
    assert set(np.unique(grid.coefficient)) == {1.0, 9.0}


def test_manufactured_solution_order():
    """Recovered u* converges at second order between n = 128 and n = 256"""
    print("\n" + "=" * 80)
    print("Testing Manufactured-Solution Convergence")
    print("=" * 80)

    errors = []
    for n in (128, 256):
        grid, exact = _manufactured(n)
        err = float(np.max(np.abs(grid.solution - exact(grid.centers))))
        errors.append(err)
        print(f"✓ n={n}: max error {err:.3e}, {grid.iterations} CG iterations")
    order = observed_order(*errors)
    assert order >= 1.8, f"Expected observed order >= 1.8, got {order:.3f}"
    print(f"✓ observed order {order:.3f}")


def test_discrete_conservation():
    """Cell balances vanish to the solver residual and fluxes telescope over sub-rectangles"""
    grid, _ = _manufactured(128)
    balance = cell_balance(grid)
    assert np.linalg.norm(balance) <= 1e-8 * np.linalg.norm(grid.source), \
        f"Expected balanced cells, got residual {np.linalg.norm(balance):.3e}"

    flux_x, flux_y = face_fluxes(grid)
    net = flux_x[:, 1:] - flux_x[:, :-1] + flux_y[1:, :] - flux_y[:-1, :]
    iy0, iy1, ix0, ix1 = 30, 90, 20, 110
    inside = net[iy0:iy1, ix0:ix1].sum()
    perimeter = (flux_x[iy0:iy1, ix1].sum() - flux_x[iy0:iy1, ix0].sum()
                 + flux_y[iy1, ix0:ix1].sum() - flux_y[iy0, ix0:ix1].sum())
    assert abs(inside - perimeter) <= 1e-12 * max(1.0, np.abs(net).sum()), \
        f"Expected telescoping fluxes, got {inside} vs {perimeter}"


def test_free_space_against_log_potential():
    """k1 = k2 = 1: the oracle reproduces (M/2pi) log|x - p| on the interior half-box"""
    print("\n" + "=" * 80)
    print("Testing Free-Space Oracle")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.4)
    p = complex(0.0, 1.8)
    src = radial_bump_source(cfg, center=p, radius=0.3)
    grid = fv_solve(cfg, src, box=(-3.0, 3.0, -3.0, 3.0), n=192)
    z = grid.centers
    exact = np.log(np.abs(z - p)) / (2.0 * math.pi)
    window = (np.abs(z.real) <= 1.5) & (np.abs(z.imag) <= 1.5) & (np.abs(z - p) > 0.3)
    field = np.where(window, exact, np.nan)
    report = compare(field, grid)
    assert report.l2_rel <= 0.01, f"Expected relative L2 <= 1%, got {report.l2_rel:.4f}"
    print(f"✓ l2_rel = {report.l2_rel:.2e} over {report.n_compared} cells")


def test_compare_identical_and_mismatched():
    grid, exact = _manufactured(128)
    same = compare(grid.solution.copy(), grid)
    assert same.l2_rel == 0.0 and same.linf_rel == 0.0
    shifted = compare(grid.solution + 3.0, grid)
    assert shifted.l2_rel < 1e-12, "Expected the constant offset to be removed"
    with pytest.raises(ShapeMismatchError):
        compare(np.zeros((64, 64)), grid)

    cfg = TwoDiskConfig(eps=0.4, k1=3.0, k2=0.5)
    banded = compare(grid.solution.copy(), grid, exclusion_cells=2, cfg=cfg)
    assert banded.n_compared < same.n_compared
    partial = grid.solution.copy()
    partial[::2, :] = np.nan
    assert compare(partial, grid).n_compared == same.n_compared // 2


def test_observed_order():
    assert observed_order(4e-3, 1e-3) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        observed_order(0.0, 1e-3)


@pytest.mark.slow
def test_lower_bound_oracle_equivalence():
    """Series solution matches a fine finite-volume run to 3% (mean-adjusted, interface bands excluded)"""
    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=5.0)
    src = lower_bound_source(cfg)
    grid = fv_solve(cfg, src, n=600)
    series = sample_series(grid, cfg, src, stride=10)
    report = compare(series, grid, exclusion_cells=2, cfg=cfg)
    assert report.l2_rel <= 0.03, f"Expected relative L2 <= 3%, got {report.l2_rel:.4f}"


@pytest.mark.slow
def test_high_contrast_oracle_equivalence():
    cfg = TwoDiskConfig(eps=0.1, k1=100.0, k2=0.01)
    src = lower_bound_source(cfg)
    grid = fv_solve(cfg, src, n=600)
    series = sample_series(grid, cfg, src, stride=10)
    report = compare(series, grid, exclusion_cells=2, cfg=cfg)
    assert report.l2_rel <= 0.05, f"Expected relative L2 <= 5%, got {report.l2_rel:.4f}"


def run_all_tests():
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(run_all_tests())
