import numpy as np
import pytest

from splatfill.renderer import GaussianCloud
from splatfill.scene_io import CameraIntrinsics, CameraPose


def random_cloud(rng, n, depth=(3.0, 5.0), spread=1.0, log_scale=(-2.2, -1.2), opacity=(-1.0, 2.0)):
    """``n`` random Gaussians in front of an identity camera."""
    pos = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(pos, q, rng.uniform(*log_scale, (n, 3)), rng.uniform(*opacity, n),
                         rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, 3))


def one_gaussian(position=(0.0, 0.0, 4.0), color=(1.0, 0.0, 0.0), opacity_logit=20.0,
                 log_scale=-2.0, background=(0.0, 0.0, 0.0)):
    return GaussianCloud([position], [[1.0, 0, 0, 0]], [[log_scale] * 3], [opacity_logit], [color],
                         background)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam32():
    return CameraIntrinsics(32, 32, 30.0, 30.0, 15.5, 15.5), CameraPose.identity()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
