"""Shared fixtures and hypothesis configuration for the suite."""

import json
from pathlib import Path

import hypothesis
import numpy as np
import pytest

import benchmarks

hypothesis.settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    derandomize=True,
)
hypothesis.settings.load_profile("suite")


@pytest.fixture(scope="session")
def expected() -> dict:
    """Frozen benchmark outputs; regenerate with scripts/regen_expected.py."""
    path = Path(__file__).with_name("expected_results.json")
    return json.loads(path.read_text())


@pytest.fixture(scope="session")
def vdp_assets() -> benchmarks.FitAssets:
    """The d=10000 van der Pol fit every surrogate benchmark shares."""
    return benchmarks.fit_from_manifest("vdp_fit.toml")


@pytest.fixture(scope="session")
def cstr_assets() -> benchmarks.FitAssets:
    return benchmarks.fit_from_manifest("cstr_fit.toml")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
