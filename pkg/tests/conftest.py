import numpy as np
import pytest

from splat4d.scene import Camera, GaussianSet, quat_normalize
from splat4d.synth import SyntheticSpec, dataset_from_scene, generate


def make_camera(H=16, W=16, f=None, near=0.1, far=100.0):
    """Camera at the origin looking down +z."""
    f = f if f is not None else 1.2 * W
    return Camera(W, H, f, f, W / 2.0, H / 2.0, np.hstack([np.eye(3), np.zeros((3, 1))]), near, far)


def random_scene(rng, n=5, degree=2, spread=0.6, depth=3.0, scale=(-2.2, -1.6), deform=0.15):
    """Small scene in front of :func:`make_camera` with nonzero deformation."""
    mu = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                          depth + rng.uniform(-0.5, 0.5, n)])
    return GaussianSet(
        mu0=mu,
        log_scale=rng.uniform(*scale, size=(n, 3)),
        rotation=quat_normalize(rng.normal(size=(n, 4))),
        color=rng.uniform(0.1, 0.9, size=(n, 3)),
        opacity_logit=rng.uniform(-0.5, 2.0, n),
        dyn_logit=rng.normal(size=n),
        dmu=rng.normal(scale=deform, size=(n, degree, 3)),
        dlogs=rng.normal(scale=deform, size=(n, degree, 3)),
        drot=rng.normal(scale=deform, size=(n, degree, 3)),
    )


def single_gaussian(mu=(0.0, 0.0, 2.0), log_scale=(-2.0, -2.0, -2.0), color=(1.0, 0.0, 0.0),
                    opacity=0.8, dyn_logit=0.0, degree=1):
    from splat4d.scene import logit

    z = np.zeros((1, degree, 3))
    return GaussianSet(
        mu0=np.array([mu], dtype=float), log_scale=np.array([log_scale], dtype=float),
        rotation=np.array([[1.0, 0, 0, 0]]), color=np.array([color], dtype=float),
        opacity_logit=np.array([float(logit(opacity))]), dyn_logit=np.array([dyn_logit]),
        dmu=z, dlogs=z.copy(), drot=z.copy(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth():
    """A small synthetic dataset (fast to train on)."""
    spec = SyntheticSpec(n_static=12, n_dynamic=4, n_frames=6, n_cameras=1, width=32, height=32, seed=3)
    sc = generate(spec)
    return spec, sc, dataset_from_scene(sc)


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
