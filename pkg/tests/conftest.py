import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def points_in_convex(pts: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Half-plane test of (n, 2) points against a CCW convex polygon."""
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        e = b - a
        inside &= e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0]) >= 0
    return inside


def stratified_square(rng: np.random.Generator, x0: float, y0: float, size: float, k: int = 100) -> np.ndarray:
    """k*k jittered samples, one per sub-square of the square [x0, x0+size) x [y0, y0+size)."""
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    u = (i.ravel() + rng.random(k * k)) / k
    v = (j.ravel() + rng.random(k * k)) / k
    return np.stack([x0 + u * size, y0 + v * size], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record and print one pass/fail line per acceptance criterion, then assert it."""
    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        ok = bool(ok)
        ACCEPTANCE.append((number, name, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}")
