"""
Shared pytest configuration: the `slow` marker for acceptance-scale runs.

Slow tests are skipped unless --runslow is given.
"""
import pytest

from twodisk_geometry import TwoDiskConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def unit_cfg():
    return TwoDiskConfig(eps=0.1, k1=5.0, k2=5.0)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep TWODISK_* variables from the developer's shell out of the tests."""
    for name in ("TWODISK_EPS", "TWODISK_R1", "TWODISK_R2", "TWODISK_K1", "TWODISK_K2",
                 "TWODISK_TOL", "TWODISK_MAX_TERMS"):
        monkeypatch.delenv(name, raising=False)
