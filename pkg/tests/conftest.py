import numpy as np
import pytest
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from anisoreg import ObservedCloud, RigidTransform


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def random_spd(rng, lo=0.1, hi=2.0):
    q = random_rotation(rng)
    return q @ np.diag(rng.uniform(lo, hi, 3)) @ q.T


def random_transform(rng, scale=1.0):
    return RigidTransform(random_rotation(rng), rng.normal(0, scale, 3))


def random_clouds(rng, M=3, N=40, noise=0.01):
    clouds = []
    for j in range(M):
        covs = np.stack([random_spd(rng, 0.2 * noise, noise) for _ in range(N)])
        clouds.append(ObservedCloud(f"c{j}", rng.normal(size=(N, 3)), covs))
    return clouds


seeds = st.integers(min_value=0, max_value=2**32 - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
