"""
Pytest configuration and shared fixtures.
"""

from pathlib import Path

import numpy as np
import pytest

from mrfei.acquisition import AcquisitionOperator, make_spiral_mask
from mrfei.sequence import GridSpec, build_dictionary, default_flip_schedule
from mrfei.subspace import fit_basis


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path_factory: pytest.TempPathFactory, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Keep dictionaries and surrogates cached by tests out of the user cache."""
    cache = tmp_path_factory.mktemp("cache")
    monkeypatch.setenv("MRFEI_CACHE_DIR", str(cache))
    return cache


@pytest.fixture
def temp_dir(tmp_path: Path) -> Path:
    """Create a temporary directory."""
    return tmp_path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_schedule():
    """First 40 repetitions of the packaged FISP schedule."""
    from dataclasses import replace

    base = default_flip_schedule()
    return replace(base, flip_angles_deg=base.flip_angles_deg[:40])


@pytest.fixture(scope="session")
def small_dictionary(short_schedule):
    """A coarse 12 x 10 grid on the short schedule."""
    return build_dictionary(short_schedule, GridSpec(n_t1=12, n_t2=10), n_states=16)


@pytest.fixture(scope="session")
def small_basis(small_dictionary):
    return fit_basis(small_dictionary, 6)


@pytest.fixture(scope="session")
def small_operator(small_basis) -> AcquisitionOperator:
    """16 x 16 spiral operator, 8 samples per frame."""
    return AcquisitionOperator(make_spiral_mask(16, 16, 8, small_basis.T), small_basis)
