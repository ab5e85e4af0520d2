"""
Shared fixtures for the simulator tests.
"""

from pathlib import Path

import numpy as np
import pytest

import constants
from models.schemas import PulseSchedule
from services.pulse_opt import hydrogen_control_model

MHZ = constants.TWO_PI * constants.MHZ


@pytest.fixture
def mhz() -> float:
    """One MHz as an angular frequency."""
    return MHZ


@pytest.fixture
def small_ladder():
    """Hydrogen n=5 ladder control model (spin 2)."""
    return hydrogen_control_model(5)


@pytest.fixture
def under_rotated(small_ladder) -> PulseSchedule:
    """Eight resonant segments giving 70% of a pi rotation in 300 ns."""
    total = 300.0 * constants.NS
    return PulseSchedule.uniform(
        8, total, 0.7 * np.pi / total, omega_max=10.0 * MHZ, delta_max=5.0 * MHZ, budget=total
    )


@pytest.fixture
def write_config(tmp_path: Path):
    """Write an INI run configuration and return its path."""

    def _write(text: str, name: str = "run.ini") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
