import numpy as np
import pytest

from rlsac.scenes import gen_epipolar_scene, gen_line_scene

_CRITERIA: list[tuple[str, bool, str]] = []


def report_criterion(name: str, ok: bool, detail: str) -> None:
    """Record an acceptance outcome; printed as one line in the terminal summary."""
    _CRITERIA.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


def noiseless_minimal_set(seed: int, m: int = 8):
    """``m`` exact correspondences (pixels) plus the scene they came from."""
    scene = gen_epipolar_scene(n_points=40, outlier_rate=0.0, pixel_noise_sigma=0.0, rng_seed=seed)
    pick = np.random.default_rng(seed).choice(scene.n, m, replace=False)
    return scene.points[pick], scene


@pytest.fixture
def line_scene():
    return gen_line_scene(0.5, n_points=60, rng_seed=3)


@pytest.fixture
def small_line_scene():
    return gen_line_scene(0.4, n_points=12, rng_seed=5)


@pytest.fixture
def f_scene():
    return gen_epipolar_scene(n_points=60, outlier_rate=0.3, rng_seed=2)
