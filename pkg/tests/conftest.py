import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from woundscan.config import PipelineConfig
from woundscan.pipeline import reconstruct
from woundscan.synth import SyntheticScene, arc_poses, default_intrinsics, render_frame

settings.register_profile(
    "woundscan",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("woundscan")


@pytest.fixture(scope="session")
def scene():
    return SyntheticScene()


@pytest.fixture(scope="session")
def intrinsics():
    return default_intrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def crater_poses():
    return arc_poses(4)


@pytest.fixture(scope="session")
def crater_frames(scene, crater_poses):
    """The default four-frame sequence at 0.5 mm depth noise."""
    return [
        render_frame(scene, P, depth_noise_sigma=0.5, seed=i, timestamp_index=i)
        for i, P in enumerate(crater_poses)
    ]


@pytest.fixture(scope="session")
def crater_reconstruction(crater_frames):
    t0 = time.perf_counter()
    rec = reconstruct(crater_frames, PipelineConfig())
    return rec, time.perf_counter() - t0


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    # tuple keys hold the parts of multi-part criteria
    for number in sorted(k for k in ACCEPTANCE_RESULTS if isinstance(k, int)):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
