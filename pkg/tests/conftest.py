import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from confeig import shapes
from confeig.mesh import assemble_stiffness

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sphere2():
    return shapes.icosphere(2)


@pytest.fixture(scope="session")
def sphere3():
    return shapes.icosphere(3)


@pytest.fixture(scope="session")
def sphere4():
    return shapes.icosphere(4)


@pytest.fixture(scope="session")
def torus16():
    return shapes.flat_torus(16)


@pytest.fixture(scope="session")
def disk10():
    return shapes.disk(10)


@pytest.fixture(scope="session")
def stiffness():
    cache = {}

    def get(mesh):
        key = id(mesh)
        if key not in cache:
            cache[key] = (mesh, assemble_stiffness(mesh))
        return cache[key][1]

    return get


def random_density(mesh, seed, sigma=0.5):
    rng = np.random.default_rng(seed)
    return np.exp(sigma * rng.standard_normal(mesh.n_vertices))


BUMP_CENTERS = {
    1: [(0, 0, 1), (0, 0, -1)],
    2: [(1, 0, 0), (-0.5, 0.866, 0), (-0.5, -0.866, 0)],
    3: [(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)],
}


def bump_density(mesh, k, width=0.15, background=1e-3):
    """``k + 1`` equal Gaussian bumps at well-separated points of the unit sphere."""
    c = np.array(BUMP_CENTERS[k], dtype=float)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    x = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    return background + np.exp(-d2 / (2 * width**2)).sum(1)


# filled by test_acceptance.py, echoed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
