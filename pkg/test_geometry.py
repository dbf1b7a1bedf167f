#!/usr/bin/env python3
"""
Tests for the two-disk geometry: configuration validation, region
classification, contrasts, conductivity and config loading.
"""
import json
import math
import sys
from unittest.mock import patch

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twodisk_errors import AmbiguousEvaluationError, InvalidConfigurationError
from twodisk_geometry import (
    RegionTag,
    TwoDiskConfig,
    blowup_factor,
    classify,
    coefficient,
    conductivity_from_contrast,
    contrast,
    contrast_parameter,
    distance_to_interfaces,
    effective_gap_parameter,
    general_blowup_factor,
    interface_normal,
    load_config,
    load_settings,
    reflected,
    resolve_region,
)

conductivities = st.floats(min_value=1e-4, max_value=1e4, allow_nan=False, allow_infinity=False)
gaps = st.floats(min_value=1e-3, max_value=0.49)


def test_config_validation():
    """Invalid eps, radii and conductivities are rejected with readable messages"""
    print("\n" + "=" * 80)
    print("Testing Configuration Validation")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    assert (cfg.r1, cfg.r2, cfg.k1, cfg.k2) == (1.0, 1.0, 1.0, 1.0), f"Expected unit defaults, got {cfg}"
    print(f"✓ defaults: {cfg}")

    bad = [dict(eps=0.0), dict(eps=0.5), dict(eps=0.1, r1=0.0), dict(eps=0.1, r2=10.0),
           dict(eps=0.1, k1=0.0), dict(eps=0.1, k2=math.inf), dict(eps=0.1, r1=2.0, r2=0.5)]
    for kwargs in bad:
        with pytest.raises(ValueError):
            TwoDiskConfig(**kwargs)
        print(f"✓ rejected {kwargs}")

    # general radii allow eps up to min(r)/10
    TwoDiskConfig(eps=0.05, r1=2.0, r2=0.5)
    print("✓ general radii with eps = min(r)/10 accepted")


def test_centers_and_gap():
    """Centers sit at +/-(eps/2 + r) so the gap is exactly eps"""
    cfg = TwoDiskConfig(eps=0.1, r1=2.0, r2=1.5)
    assert cfg.c1 == complex(2.05, 0.0), f"Expected c1 = 2.05, got {cfg.c1}"
    assert cfg.c2 == complex(-1.55, 0.0), f"Expected c2 = -1.55, got {cfg.c2}"
    gap = (cfg.c1.real - cfg.r1) - (cfg.c2.real + cfg.r2)
    assert abs(gap - cfg.eps) < 1e-15, f"Expected gap {cfg.eps}, got {gap}"


def test_classify_examples():
    """Origin is matrix, centers are inclusions, (eps/2, 0) is on the boundary of disk 1"""
    print("\n" + "=" * 80)
    print("Testing Region Classification")
    print("=" * 80)

    cfg = TwoDiskConfig(eps=0.1)
    origin = classify(0j, cfg)
    assert origin.tag == RegionTag.MATRIX and origin.on_boundary is None, f"Expected Matrix, got {origin}"
    print("✓ origin -> Matrix")

    assert classify(cfg.c1, cfg).tag == RegionTag.INCLUSION1
    assert classify(cfg.c2, cfg).tag == RegionTag.INCLUSION2
    print("✓ centers -> inclusions")

    edge = classify((cfg.eps / 2.0, 0.0), cfg, tol=0.0)
    assert edge.tag == RegionTag.MATRIX, f"Expected Matrix tag on the interface, got {edge.tag}"
    assert edge.on_boundary == 1, f"Expected on_boundary = 1, got {edge.on_boundary}"
    print("✓ (eps/2, 0) -> Matrix, on boundary 1")


def test_classify_tolerance_range():
    """tol must lie in [0, eps/4)"""
    cfg = TwoDiskConfig(eps=0.1)
    with pytest.raises(ValueError):
        classify(0j, cfg, tol=-1e-3)
    with pytest.raises(ValueError):
        classify(0j, cfg, tol=0.025)


def test_contrast_examples():
    """Identity contrast at k = 1, alpha = 1/2 at k = 3, alpha -> 1 as k grows"""
    assert contrast(TwoDiskConfig(eps=0.1)) == (0.0, 0.0)
    assert contrast_parameter(3.0) == 0.5, f"Expected 0.5, got {contrast_parameter(3.0)}"
    alpha = contrast_parameter(1e6)
    assert abs(alpha - 0.999998000002) < 1e-12, f"Expected 0.999998000002, got {alpha}"
    with pytest.raises(InvalidConfigurationError):
        contrast_parameter(-1.0)


@given(conductivities)
@settings(max_examples=200, deadline=None)
def test_contrast_bijection(k):
    """contrast_parameter maps (0, inf) into (-1, 1) and is inverted by conductivity_from_contrast"""
    alpha = contrast_parameter(k)
    assert -1.0 < alpha < 1.0
    assert math.isclose(conductivity_from_contrast(alpha), k, rel_tol=1e-9)


def test_coefficient_examples():
    """a = 1 in the matrix, k1 in disk 1, ambiguous on the interface without a hint"""
    cfg = TwoDiskConfig(eps=0.1, k1=7.0, k2=0.2)
    assert coefficient(0j, cfg) == 1.0
    assert coefficient(cfg.c1, cfg) == 7.0
    assert coefficient(cfg.c2, cfg) == 0.2
    with pytest.raises(AmbiguousEvaluationError):
        coefficient((cfg.eps / 2.0, 0.0), cfg)
    assert coefficient((cfg.eps / 2.0, 0.0), cfg, hint=RegionTag.INCLUSION1) == 7.0
    assert coefficient((cfg.eps / 2.0, 0.0), cfg, hint=RegionTag.MATRIX) == 1.0


def test_resolve_region_rejects_bad_hints():
    """A side hint must be one of the two sides of the interface the point is on"""
    cfg = TwoDiskConfig(eps=0.1)
    with pytest.raises(AmbiguousEvaluationError):
        resolve_region((cfg.eps / 2.0, 0.0), cfg, RegionTag.INCLUSION2)
    with pytest.raises(AmbiguousEvaluationError):
        resolve_region(0j, cfg, RegionTag.INCLUSION1)
    assert resolve_region(0j, cfg, RegionTag.MATRIX).tag == RegionTag.MATRIX


def test_partition():
    """Quasi-random points get exactly one tag and the coefficient agrees with it"""
    cfg = TwoDiskConfig(eps=0.05, k1=3.0, k2=9.0)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-3.0, 3.0, 2000) + 1j * rng.uniform(-2.0, 2.0, 2000)
    expected = {RegionTag.MATRIX: 1.0, RegionTag.INCLUSION1: 3.0, RegionTag.INCLUSION2: 9.0}
    for p in pts:
        region = classify(p, cfg)
        inside = (abs(p - cfg.c1) < cfg.r1) + (abs(p - cfg.c2) < cfg.r2)
        assert inside <= 1, f"Expected disjoint disks, point {p} is in both"
        assert coefficient(p, cfg) == expected[region.tag]


def test_distance_and_normal():
    """Distance to the nearest circle and the outward normal"""
    cfg = TwoDiskConfig(eps=0.1)
    d, which = distance_to_interfaces(0j, cfg)
    assert abs(d - 0.05) < 1e-15 and which in (1, 2), f"Expected 0.05, got {d}"
    d, which = distance_to_interfaces(cfg.c1, cfg)
    assert (d, which) == (1.0, 1)
    nu = interface_normal(cfg.c1 + 1j, 1, cfg)
    assert abs(nu - 1j) < 1e-15, f"Expected i, got {nu}"


def test_effective_gap_parameter_and_blowup():
    """tau = 2 sqrt(eps) for unit radii; both blow-up factors agree there"""
    cfg = TwoDiskConfig(eps=0.04, k1=1e4, k2=1e4)
    assert abs(effective_gap_parameter(cfg) - 0.4) < 1e-14
    assert math.isclose(blowup_factor(cfg), general_blowup_factor(cfg), rel_tol=1e-14)
    assert blowup_factor(TwoDiskConfig(eps=0.04)) == 1.0
    general = TwoDiskConfig(eps=0.02, r1=2.0, r2=0.5)
    assert abs(effective_gap_parameter(general) - math.sqrt(0.1)) < 1e-14


def test_reflected():
    """The mirror configuration swaps radii and conductivities"""
    cfg = TwoDiskConfig(eps=0.02, r1=2.0, r2=0.5, k1=3.0, k2=0.5)
    mirror = reflected(cfg)
    assert (mirror.r1, mirror.r2, mirror.k1, mirror.k2) == (0.5, 2.0, 0.5, 3.0)
    assert abs(mirror.c1 + cfg.c2) < 1e-15 and abs(mirror.c2 + cfg.c1) < 1e-15


def test_load_config_key_value(tmp_path):
    """key = value files are parsed with python-dotenv"""
    print("\n" + "=" * 80)
    print("Testing Config Loading")
    print("=" * 80)

    path = tmp_path / "run.env"
    path.write_text("eps = 0.1\nk1 = 5\nk2 = 5\n")
    cfg = load_config(path)
    assert (cfg.eps, cfg.k1, cfg.k2, cfg.r1) == (0.1, 5.0, 5.0, 1.0), f"Expected eps=0.1 k=5, got {cfg}"
    print(f"✓ key=value config: {cfg}")


def test_load_config_json_and_overrides(tmp_path):
    """JSON files work; explicit overrides beat the file"""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"eps": 0.2, "k1": 2.0, "source": "radial_bump"}))
    cfg = load_config(path, k1=4.0)
    assert (cfg.eps, cfg.k1) == (0.2, 4.0), f"Expected eps=0.2 k1=4, got {cfg}"


def test_load_config_environment(tmp_path, monkeypatch):
    """TWODISK_* variables override file values"""
    path = tmp_path / "run.env"
    path.write_text("eps = 0.1\n")
    monkeypatch.setenv("TWODISK_EPS", "0.3")
    monkeypatch.setenv("TWODISK_TOL", "1e-6")
    with patch("twodisk_geometry.load_dotenv"):
        values = load_settings(path)
        cfg = load_config(path)
    assert cfg.eps == 0.3, f"Expected environment eps 0.3, got {cfg.eps}"
    assert values["tol"] == "1e-6"


def test_load_config_rejects_unknown_and_invalid(tmp_path):
    """Unknown keys and invalid values raise InvalidConfigurationError"""
    path = tmp_path / "bad.env"
    path.write_text("eps = 0.1\ncolour = blue\n")
    with pytest.raises(InvalidConfigurationError):
        load_config(path, use_env=False)
    path.write_text("eps = 0.7\n")
    with pytest.raises(InvalidConfigurationError):
        load_config(path, use_env=False)
    path.write_text("{not json")
    path.rename(tmp_path / "bad.json")
    with pytest.raises(InvalidConfigurationError):
        load_config(tmp_path / "bad.json", use_env=False)


@given(gaps, conductivities, conductivities)
@settings(max_examples=50, deadline=None)
def test_config_is_hashable(eps, k1, k2):
    """Configurations key caches, so equal values hash equally"""
    a = TwoDiskConfig(eps=eps, k1=k1, k2=k2)
    b = TwoDiskConfig(eps=eps, k1=k1, k2=k2)
    assert a == b and hash(a) == hash(b)


def run_all_tests():
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(run_all_tests())
