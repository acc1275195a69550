import numpy as np
import pytest

from kprefine.geometry import CameraIntrinsics, RelativePose, rotation_from_axis_angle
from kprefine.synthetic import SceneConfig, make_dataset


def random_pose(rng, max_deg=30.0):
    axis = rng.normal(size=3)
    R = rotation_from_axis_angle(axis, np.radians(rng.uniform(0, max_deg)))
    return RelativePose(R, rng.normal(size=3))


def project_points(pose, n=50, rng=None, depth=(2.0, 8.0)):
    """Exact calibrated correspondences of random points in front of both cameras."""
    rng = rng or np.random.default_rng(0)
    out1, out2 = [], []
    while sum(len(a) for a in out1) < n:
        X = np.column_stack([rng.uniform(-1, 1, 4 * n), rng.uniform(-1, 1, 4 * n), np.ones(4 * n)])
        X *= rng.uniform(*depth, 4 * n)[:, None]
        X2 = X @ pose.rotation.T + pose.translation
        ok = X2[:, 2] > 0.1
        out1.append(X[ok] / X[ok][:, 2:])
        out2.append(X2[ok] / X2[ok][:, 2:])
    return np.concatenate(out1)[:n], np.concatenate(out2)[:n]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return SceneConfig(seed=3, num_points=40, outlier_fraction=0.25, descriptor_dim=8)


@pytest.fixture(scope="session")
def small_dataset(small_scene):
    return make_dataset(small_scene, 160)


@pytest.fixture
def k500():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


def jitter_biases(weights, seed=0, scale=0.05):
    """Nonzero biases keep pre-activations off the ReLU kink, where finite differences are one-sided."""
    rng = np.random.default_rng(seed)
    for layer in weights.layers:
        layer.bias[:] = rng.uniform(-scale, scale, layer.bias.shape)
    return weights


ACCEPTANCE = {}


@pytest.fixture
def report(request):
    """Record one acceptance criterion as ``report(name, passed, detail)``."""

    def _report(name, passed, detail=""):
        line = f"{name}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE[name] = line
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[name])
