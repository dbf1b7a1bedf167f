#!/usr/bin/env python3
"""
Tests for the source potentials and the representation-formula solution:
closed-form potentials of uniform disks, free-space collapse, gradient and
Hessian checks, linearity and the source presets.
"""
import logging
import math
import sys

import numpy as np
import pytest

from twodisk_errors import AmbiguousEvaluationError, InvalidConfigurationError, TooCloseToInterfaceError
from twodisk_geometry import RegionTag, TwoDiskConfig
from twodisk_greens import SeriesPolicy
from twodisk_potentials import (
    ConstantField,
    ConstantScalar,
    PiecewiseSource,
    PotentialEvaluator,
    QuadratureSettings,
    SourceComponent,
    SourceSpec,
    build_grid,
    check_support,
    constant_disk1_source,
    disk_rule,
    grad_u,
    higher_deriv_u,
    lower_bound_source,
    polar_rule,
    potential_g,
    potential_h,
    radial_bump_source,
    region_polar_rule,
    solve_u,
)


def _unit_scalar_disk1(cfg: TwoDiskConfig) -> PiecewiseSource:
    return PiecewiseSource({1: SourceComponent(cfg.c1, cfg.r1, scalar=ConstantScalar(1.0, cfg.c1, cfg.r1))})


def test_zero_source_gives_zero():
    """f = 0 everywhere: u and its gradient vanish"""
    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=5.0)
    src = SourceSpec(preset="zero").build(cfg)
    assert src.is_zero
    for x in (0j, cfg.c1 + 0.3j, complex(2.0, 3.0)):
        assert solve_u(x, cfg, src).value == 0.0
        assert grad_u(x, cfg, src).value == 0j


def test_uniform_field_potential_far_field():
    """Constant e1 field on disk 1: h_1 is the exact dipole -pi r^2 (x - c1)_1/|x - c1|^2 outside"""
    print("\n" + "=" * 80)
    print("Testing Closed-Form Disk Potentials")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    src = constant_disk1_source(cfg)
    for offset in (5.0, complex(0.0, 3.0), complex(-2.0, 2.0)):
        x = cfg.c1 + offset
        expected = -math.pi * cfg.r1 ** 2 * offset.real / abs(offset) ** 2
        value = potential_h(1, x, src, cfg)
        assert abs(value - expected) < 1e-8, f"Expected {expected}, got {value} at offset {offset}"
    print("✓ h_1 matches the dipole field outside disk 1")


def test_uniform_scalar_potential():
    """f3 = 1 on disk 1: g_1(c1) = -pi/2 and g_1 = pi r^2 log|x - c1| outside"""
    cfg = TwoDiskConfig(eps=0.1)
    src = _unit_scalar_disk1(cfg)
    at_center = potential_g(1, cfg.c1, src, cfg)
    assert abs(at_center + math.pi / 2.0) < 1e-6, f"Expected -pi/2, got {at_center}"
    print(f"✓ g_1(c1) = {at_center:.10f}")

    x = cfg.c1 + 3j
    far = potential_g(1, x, src, cfg)
    assert abs(far - math.pi * math.log(3.0)) < 1e-8, f"Expected pi log 3, got {far}"
    print(f"✓ g_1(c1 + 3i) = {far:.10f}")


def test_disk_and_polar_rules_integrate_area():
    """Weights of each rule sum to the disk area"""
    c, R = complex(0.4, -0.2), 0.7
    _, w = disk_rule(c, R, 16, 32)
    assert abs(w.sum() - math.pi * R * R) < 1e-12

    _, w_in = polar_rule(c + 0.3 * R, c, R, 16, 32)
    assert abs(w_in.sum() - math.pi * R * R) < 1e-10, f"Expected pi R^2, got {w_in.sum()}"
    _, w_out = polar_rule(c + 1.2 * R, c, R, 16, 32)
    assert abs(w_out.sum() / (math.pi * R * R) - 1.0) < 1e-4, f"Expected pi R^2, got {w_out.sum()}"


def test_quadtree_grid_for_matrix_source_over_inclusions():
    """A matrix-region support covering both disks is integrated by the quadtree, inclusions excluded"""
    cfg = TwoDiskConfig(eps=0.1)
    comp = SourceComponent(0j, 3.0, scalar=ConstantScalar(1.0, 0j, 3.0))
    grid = build_grid(0, comp, cfg, QuadratureSettings())
    expected = math.pi * 9.0 - 2.0 * math.pi
    assert abs(grid.total_weight / expected - 1.0) < 1e-2, f"Expected {expected}, got {grid.total_weight}"
    assert grid.coarse is not None and grid.disk is None
    assert np.all((grid.boundary_normals * np.conj(grid.boundary_nodes - cfg.c1)).real[:256] < 0)


def _cut_disk_potential(x: complex, cfg: TwoDiskConfig) -> tuple:
    """g and grad g of f3 = 1 on |y| < 3 minus both unit inclusions, x inside the support"""
    g = math.pi * (9.0 * math.log(3.0) - (9.0 - abs(x) ** 2) / 2.0)
    dg = math.pi * x
    for c in (cfg.c1, cfg.c2):
        g -= math.pi * math.log(abs(x - c))
        dg -= math.pi * (x - c) / abs(x - c) ** 2
    return g, dg


def test_region_polar_rule_integrates_cut_area():
    """Polar rule over the support minus the inclusions, seen from inside, outside and the gap"""
    cfg = TwoDiskConfig(eps=0.1)
    holes = [(cfg.c1, cfg.r1), (cfg.c2, cfg.r2)]
    expected = 7.0 * math.pi
    for z in (0j, 0.5j, complex(2.5, 0.0), complex(-1.05, 1.6), 3.5j):
        nodes, weights = region_polar_rule(z, 0j, 3.0, holes, 16, 32)
        assert abs(weights.sum() / expected - 1.0) < 1e-8, f"Expected {expected}, got {weights.sum()} from {z}"
        assert np.all(np.abs(nodes) < 3.0 + 1e-12)
        for c, r in holes:
            assert np.all(np.abs(nodes - c) > r - 1e-12)


def test_matrix_source_over_inclusions_near_field():
    """Potentials of a support cut by both inclusions match the closed form at nearby points"""
    print("\n" + "=" * 80)
    print("Testing Near Field of a Cut Matrix Support")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    comp = SourceComponent(0j, 3.0, scalar=ConstantScalar(1.0, 0j, 3.0))
    src = PiecewiseSource({0: comp})
    points = [0j, 0.5j, complex(2.5, 0.0), complex(-1.05, 1.6), complex(0.3, -2.0)]
    ev = PotentialEvaluator(cfg, src)
    fine = PotentialEvaluator(cfg, src, QuadratureSettings().refined())
    vals, fine_vals = ev.evaluate(0, points), fine.evaluate(0, points)
    for n, x in enumerate(points):
        g, dg = _cut_disk_potential(x, cfg)
        assert abs(vals.g[n] - g) < 1e-6 * abs(g), f"Expected g = {g}, got {vals.g[n]} at {x}"
        assert abs(vals.dg[n] - dg) < 1e-6 * max(1.0, abs(dg)), f"Expected grad g = {dg}, got {vals.dg[n]} at {x}"
        assert abs(vals.g[n] - fine_vals.g[n]) < 1e-6 * abs(g)
        print(f"✓ g({x}) = {vals.g[n]:.10f}")


def test_lower_bound_source_shape():
    """Unit-integral e1 bump at (-3, 0), even in x2, with D1 of the gap potential negative"""
    print("\n" + "=" * 80)
    print("Testing Lower-Bound Source")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    src = lower_bound_source(cfg)
    comp = src.components[0]
    nodes, weights = disk_rule(comp.center, comp.radius, 64, 64)
    f = comp.field_values(nodes)
    total = np.sum(weights * f)
    assert abs(total - 1.0) < 1e-6, f"Expected unit integral of f1, got {total}"
    assert np.max(np.abs(f.imag)) == 0.0
    print(f"✓ int f1 = {total.real:.10f}, f2 = 0")

    mirrored = comp.center + np.array([0.03 + 0.04j, -0.05 + 0.02j])
    assert np.allclose(comp.field_values(mirrored), comp.field_values(np.conj(mirrored - comp.center) + comp.center))
    print("✓ even in x2")

    segment = np.linspace(-(cfg.eps + cfg.eps ** 2 / 4.0), cfg.eps + cfg.eps ** 2 / 4.0, 20)
    ev = PotentialEvaluator(cfg, src)
    d1h = -ev.evaluate(0, segment.astype(complex)).dh.real
    assert np.all(d1h < 0), f"Expected D1h < 0 on the gap segment, got max {d1h.max()}"
    print(f"✓ D1h on the gap segment, max {d1h.max():.4e}")


def test_source_outside_region_rejected():
    cfg = TwoDiskConfig(eps=0.1)
    with pytest.raises(InvalidConfigurationError):
        lower_bound_source(cfg, center=(0.5, 0.0))
    with pytest.raises(InvalidConfigurationError):
        radial_bump_source(cfg, center=(1.9, 0.0), radius=0.3)


def test_free_space_solution():
    """k1 = k2 = 1: u is the log potential (M/2pi) log|x - p| of the bump"""
    print("\n" + "=" * 80)
    print("Testing Free-Space Collapse of the Solution")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    p = complex(0.0, 2.0)
    src = radial_bump_source(cfg, center=p, radius=0.3)
    ev = PotentialEvaluator(cfg, src)
    for x in (complex(0.0, -1.5), cfg.c1 + 0.4j, complex(3.0, 2.0)):
        expected = math.log(abs(x - p)) / (2.0 * math.pi)
        value = solve_u(x, cfg, src, evaluator=ev).value
        assert abs(value - expected) < 1e-5, f"Expected {expected}, got {value} at {x}"
        g = grad_u(x, cfg, src, evaluator=ev).value
        g_expected = (x - p) / abs(x - p) ** 2 / (2.0 * math.pi)
        assert abs(g - g_expected) < 1e-5, f"Expected {g_expected}, got {g} at {x}"
        print(f"✓ u({x}) = {value:.8f}")


def test_gradient_matches_finite_differences():
    """grad_u agrees with central differences of solve_u"""
    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=5.0)
    src = radial_bump_source(cfg, center=(0.0, 2.0), radius=0.3)
    policy = SeriesPolicy(tol=1e-13)
    ev = PotentialEvaluator(cfg, src)
    h = 1e-5
    for x in (complex(0.5, 1.0), cfg.c1 + complex(0.2, 0.3), cfg.c2 - 0.5):
        g = grad_u(x, cfg, src, policy, evaluator=ev).value
        d1 = (solve_u(x + h, cfg, src, policy, evaluator=ev).value
              - solve_u(x - h, cfg, src, policy, evaluator=ev).value) / (2 * h)
        d2 = (solve_u(x + 1j * h, cfg, src, policy, evaluator=ev).value
              - solve_u(x - 1j * h, cfg, src, policy, evaluator=ev).value) / (2 * h)
        assert abs(g - complex(d1, d2)) < 1e-6 * max(1.0, abs(g)), f"Expected {complex(d1, d2)}, got {g} at {x}"


def test_gap_gradient_symmetry_and_sign():
    """Lower-bound source: D2u(0) = 0 by symmetry and D1u(0) < 0"""
    for k in (1.0, 10.0):
        cfg = TwoDiskConfig(eps=0.1, k1=k, k2=k)
        g = grad_u(0j, cfg, lower_bound_source(cfg)).value
        assert abs(g.imag) < 1e-10, f"Expected D2u(0) = 0, got {g.imag}"
        assert g.real < 0, f"Expected D1u(0) < 0 at k={k}, got {g.real}"


def test_gradient_on_interface_needs_hint():
    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=5.0)
    src = lower_bound_source(cfg)
    edge = complex(cfg.eps / 2.0, 0.0)
    with pytest.raises(AmbiguousEvaluationError):
        grad_u(edge, cfg, src)
    outside = grad_u(edge, cfg, src, x_hint=RegionTag.MATRIX).value
    inside = grad_u(edge, cfg, src, x_hint=RegionTag.INCLUSION1).value
    # normal flux continuity: D1u_out = k1 D1u_in on the axis
    assert abs(outside.real - cfg.k1 * inside.real) < 1e-6 * abs(outside.real)


def test_pde_residual():
    """Five-point Laplacian of u equals f3 in the matrix and vanishes elsewhere"""
    print("\n" + "=" * 80)
    print("Testing PDE Residual")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=0.5)
    p = complex(0.0, 2.5)
    src = radial_bump_source(cfg, center=p, radius=0.6)
    policy = SeriesPolicy(tol=1e-13)
    ev = PotentialEvaluator(cfg, src)
    h = 5e-3

    def laplacian(x: complex) -> float:
        u = [solve_u(x + d, cfg, src, policy, evaluator=ev).value for d in (h, -h, 1j * h, -1j * h, 0.0)]
        return (sum(u[:4]) - 4.0 * u[4]) / h ** 2

    for x in (p + 0.1, p + complex(-0.2, 0.15)):
        f3 = float(src.components[0].scalar_values(np.array([x]))[0])
        lap = laplacian(x)
        assert abs(lap - f3) < 2e-2 * f3, f"Expected Laplacian {f3}, got {lap} at {x}"
        print(f"✓ Laplacian {lap:.6f} vs f3 {f3:.6f}")
    for x in (complex(0.5, 1.0), cfg.c1 + complex(0.2, 0.3), cfg.c2 - 0.5):
        lap = laplacian(x)
        assert abs(lap) < 1e-3, f"Expected harmonic u, got Laplacian {lap} at {x}"


def test_interface_continuity_of_u_and_weighted_flux():
    """u and a du/dnu are continuous across both interfaces"""
    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=0.5)
    src = radial_bump_source(cfg, center=(0.0, 2.0), radius=0.3)
    policy = SeriesPolicy(tol=1e-13)
    ev = PotentialEvaluator(cfg, src)
    d = 1e-4
    for which, tag in ((1, RegionTag.INCLUSION1), (2, RegionTag.INCLUSION2)):
        for t in (0.7, 2.0, 3.5):
            nu = complex(math.cos(t), math.sin(t))
            s = cfg.center(which) + cfg.radius(which) * nu
            k = cfg.conductivity(which)

            u_out = solve_u(s, cfg, src, policy, x_hint=RegionTag.MATRIX, evaluator=ev).value
            u_in = solve_u(s, cfg, src, policy, x_hint=tag, evaluator=ev).value
            assert abs(u_out - u_in) < 1e-8, f"Expected continuous u, got jump {u_out - u_in} at {s}"
            flux_out = (grad_u(s, cfg, src, policy, x_hint=RegionTag.MATRIX, evaluator=ev).value * nu.conjugate()).real
            flux_in = (grad_u(s, cfg, src, policy, x_hint=tag, evaluator=ev).value * nu.conjugate()).real
            assert abs(flux_out - k * flux_in) < 1e-6 * max(abs(flux_out), 1e-3), \
                f"Expected continuous weighted flux, got {flux_out} vs {k * flux_in} at {s}"

            g_out = grad_u(s + d * nu, cfg, src, policy, evaluator=ev).value
            g_in = grad_u(s - d * nu, cfg, src, policy, evaluator=ev).value
            jump = abs(solve_u(s + d * nu, cfg, src, policy, evaluator=ev).value
                       - solve_u(s - d * nu, cfg, src, policy, evaluator=ev).value)
            assert jump <= 3.0 * d * max(abs(g_out), abs(g_in)) + 1e-9, f"Expected O(d) value jump, got {jump}"
            weighted = abs((g_out * nu.conjugate()).real - k * (g_in * nu.conjugate()).real)
            assert weighted <= 1e-2 * abs(flux_out) + 1e-6, f"Expected small weighted flux jump, got {weighted}"


def test_quadrature_error_reported_for_coarse_disk_rule(caplog):
    """A coarse disk rule reports a nonzero refined-rule estimate and logs a warning"""
    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=5.0)
    src = lower_bound_source(cfg)
    fine = grad_u(0j, cfg, src)
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="twodisk_potentials"):
        coarse = grad_u(0j, cfg, src, quad=QuadratureSettings(n_r=4, n_theta=8))
    assert coarse.quad_error > 1e-5, f"Expected a visible quadrature estimate, got {coarse.quad_error}"
    assert coarse.quad_error > 10.0 * fine.quad_error, f"Expected {coarse.quad_error} >> {fine.quad_error}"
    assert "differs from the refined rule" in caplog.text
    assert solve_u(0j, cfg, src, quad=QuadratureSettings(n_r=4, n_theta=8)).quad_error == coarse.quad_error


def test_linearity():
    """u is linear in the source"""
    cfg = TwoDiskConfig(eps=0.1, k1=3.0, k2=0.5)
    a = constant_disk1_source(cfg)
    b = radial_bump_source(cfg, center=(0.0, 2.0), radius=0.3)
    x = complex(-0.3, 0.7)
    ua = solve_u(x, cfg, a).value
    ub = solve_u(x, cfg, b).value
    both = solve_u(x, cfg, a.plus(b)).value
    assert abs(both - (ua + ub)) < 1e-9, f"Expected superposition, got {both} vs {ua + ub}"
    doubled = solve_u(x, cfg, b.scaled(2.0)).value
    assert abs(doubled - 2.0 * ub) < 1e-9
    with pytest.raises(ValueError):
        b.plus(lower_bound_source(cfg))


def test_higher_derivatives_free_space():
    """k = 1 bump: D^2 u = (M/2pi)(delta r^2 - 2 x x^T)/r^4"""
    print("\n" + "=" * 80)
    print("Testing Higher Derivatives")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    p = complex(0.0, 2.0)
    src = radial_bump_source(cfg, center=p, radius=0.3)
    x = complex(0.0, 3.0)
    rep = higher_deriv_u(x, 2, cfg, src)
    d = np.array([(x - p).real, (x - p).imag])
    r2 = d @ d
    expected = (np.eye(2) * r2 - 2.0 * np.outer(d, d)) / r2 ** 2 / (2.0 * math.pi)
    assert rep.value.shape == (2, 2)
    assert np.max(np.abs(rep.value - expected)) < 1e-3 * np.max(np.abs(expected)), \
        f"Expected {expected}, got {rep.value}"
    print(f"✓ Hessian matches, error estimate {rep.quad_error:.2e}")

    third = higher_deriv_u(x, 3, cfg, src).value
    assert third.shape == (2, 2, 2)
    assert abs(third[0, 0, 1] - third[0, 1, 0]) < 1e-4 * np.max(np.abs(third))
    with pytest.raises(ValueError):
        higher_deriv_u(x, 5, cfg, src)


def test_higher_derivatives_too_close_to_interface():
    cfg = TwoDiskConfig(eps=0.1, k1=5.0, k2=5.0)
    with pytest.raises(TooCloseToInterfaceError):
        higher_deriv_u(complex(cfg.eps / 2.0 - 1e-8, 0.0), 2, cfg, lower_bound_source(cfg))


def test_check_support():
    cfg = TwoDiskConfig(eps=0.1)
    for src in (lower_bound_source(cfg), constant_disk1_source(cfg), radial_bump_source(cfg)):
        assert check_support(src)
    leaky = PiecewiseSource({0: SourceComponent(complex(0.0, 3.0), 0.2, field=ConstantField(1.0, complex(0.0, 3.0), 0.5))})
    assert not check_support(leaky)


def test_source_spec_build():
    """Presets, strength scaling and region detection"""
    cfg = TwoDiskConfig(eps=0.1)
    assert set(SourceSpec().build(cfg).components) == {0}
    inside = SourceSpec(preset="radial_bump", center_x=cfg.c1.real, center_y=0.0, radius=0.3).build(cfg)
    assert set(inside.components) == {1}
    doubled = SourceSpec(preset="lower_bound", strength=2.0).build(cfg)
    z = np.array([complex(-3.0, 0.0)])
    base = SourceSpec(preset="lower_bound").build(cfg)
    assert np.allclose(doubled.components[0].field_values(z), 2.0 * base.components[0].field_values(z))
    spec = SourceSpec.from_settings({"source": "radial_bump", "source_radius": "0.2"})
    assert spec.radius == 0.2 and spec.preset == "radial_bump"
    with pytest.raises(ValueError):
        SourceSpec(preset="dipole")


def test_quadrature_settings_validation():
    with pytest.raises(ValueError):
        QuadratureSettings(n_r=0)
    with pytest.raises(ValueError):
        QuadratureSettings(max_depth=13)
    fine = QuadratureSettings().refined()
    assert (fine.n_r, fine.n_theta) == (64, 128)


def run_all_tests():
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(run_all_tests())
