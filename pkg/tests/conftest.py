import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mflow.geometry import Hyperboloid, Sphere

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture(params=["h2", "s2"])
def manifold(request):
    return Hyperboloid(2) if request.param == "h2" else Sphere(2)


def random_points(M, n, rng, scale=1.0):
    o = M.origin_like((n,))
    return M.exp(o, M.proj_tangent(o, rng.normal(size=(n, M.ambient_dim)) * scale))


ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion(capsys):
    """Record one PASS/FAIL line per acceptance criterion and echo it immediately."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
