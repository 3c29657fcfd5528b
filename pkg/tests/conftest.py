import os
from pathlib import Path

import pytest

from ionsource.ensemble import ExtractionConfig, RunConfig
from ionsource.geometry import LensSpec, SceneSpec
from ionsource.trap import CA40, DriveConfig, IdealQuadrupole, secular_frequencies

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("IONSOURCE_TEST_CACHE", ROOT / ".cache" / "test-basis"))

# (criterion, description, passed, detail), printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, desc, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: (r[0], r[1])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] C{crit} {desc}: {detail}")


@pytest.fixture(scope="session")
def scene():
    return SceneSpec(lens=LensSpec())


@pytest.fixture(scope="session")
def scene_basis(scene):
    from ionsource.scene import build_scene_basis
    return build_scene_basis(scene, cache_dir=CACHE)


@pytest.fixture(scope="session")
def scene_secular(scene_basis):
    return secular_frequencies(CA40, DriveConfig(), scene_basis)


# ----------------------------------------------------------------- analytic trap

@pytest.fixture(scope="session")
def quad():
    return IdealQuadrupole(1e-3)


@pytest.fixture(scope="session")
def quad_config():
    """Ideal trap pushed by a uniform bias; extraction switches the axial well off."""
    drive = DriveConfig(rf_amplitude=100.0, rf_frequency=10e6,
                        dc_voltages={"axial": 5.0, "bias_z": -2000.0}, rf_group="rf")
    ex = ExtractionConfig(groups=("axial",), voltage=0.0, ramp_duration=20e-9)
    sc = SceneSpec(tof_plane_distance=10e-3, measurement_plane_distance=15e-3,
                   detector_distance=20e-3)
    return RunConfig(species=CA40, temperature=2e-3, shots=40, drive=drive, extraction=ex,
                     scene=sc)


@pytest.fixture(scope="session")
def quad_secular(quad, quad_config):
    return secular_frequencies(CA40, quad_config.drive, quad)
