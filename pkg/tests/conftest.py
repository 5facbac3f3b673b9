import numpy as np
import pytest

from tagbundle3d.geometry import DEFAULT_INTRINSICS, CameraIntrinsics, build_bundle


@pytest.fixture(scope="session")
def k():
    return DEFAULT_INTRINSICS


@pytest.fixture(scope="session")
def vga():
    """Small pinhole camera with round numbers for hand-checked projections."""
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


@pytest.fixture(scope="session")
def bundle():
    """Leader plus one follower folded 10 degrees, 40 mm screen gap."""
    return build_bundle(130.0, 1, 10.0, 40.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record a one-line acceptance verdict, printed in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion: int, ok: bool, detail: str) -> bool:
        lines.append((criterion, f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
