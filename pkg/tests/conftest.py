import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tumortriage.slide_store import SyntheticSlideSpec, generate_synthetic_slide

settings.register_profile(
    "repo", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=50)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def tumor_slide():
    spec = SyntheticSlideSpec(512, 512, 128, 0.5, 2, (30, 40), seed=11, slide_id="t0")
    return generate_synthetic_slide(spec)


@pytest.fixture(scope="session")
def normal_slide():
    spec = SyntheticSlideSpec(512, 512, 128, 0.5, 0, (30, 40), seed=12, slide_id="n0")
    return generate_synthetic_slide(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Print and remember one PASS/FAIL line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash.setdefault(ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
