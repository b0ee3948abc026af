import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d.deformation import deform_backward, deform_scene, deformed_params, eval_deltas
from splat4d.scene import DeformCoeffs, GaussianPrimitive, covariance, logit

from conftest import random_scene


def coeffs(rows):
    dmu = np.array(rows, dtype=float)
    return DeformCoeffs(dmu, np.zeros_like(dmu), np.zeros_like(dmu))


def test_deltas_vanish_at_zero(rng):
    c = DeformCoeffs(*(rng.normal(size=(3, 3)) for _ in range(3)))
    for d in eval_deltas(c, 0.0):
        assert not d.any()


def test_linear_term():
    dmu, _, _ = eval_deltas(coeffs([[1, 0, 0]]), 0.5)
    np.testing.assert_allclose(dmu, [0.5, 0, 0])


def test_quadratic_polynomial():
    dmu, _, _ = eval_deltas(coeffs([[1, 0, 0], [2, 0, 0]]), 0.5)
    np.testing.assert_allclose(dmu, [1.0, 0, 0])


def prim_with(dmu_rows, dyn_logit, mu0=(0.0, 0.0, 0.0), rng=None):
    rng = rng or np.random.default_rng(0)
    c = coeffs(dmu_rows)
    c.dlogs[:] = rng.normal(scale=0.3, size=c.dlogs.shape)
    c.drot[:] = rng.normal(scale=0.5, size=c.drot.shape)
    q = rng.normal(size=4)
    return GaussianPrimitive(np.array(mu0), rng.normal(scale=0.3, size=3), q / np.linalg.norm(q),
                             np.full(3, 0.5), 0.0, dyn_logit, c)


def test_modulated_mean_quarter_weight():
    # Delta mu at t=1 with a single linear row (2,0,0) is (2,0,0); w = 0.25
    p = prim_with([[2, 0, 0]], float(logit(0.25)))
    mu, _, _, _ = deformed_params(p, 1.0)
    np.testing.assert_allclose(mu, [0.5, 0, 0], atol=1e-12)


def test_static_limit_recovers_canonical():
    p = prim_with([[2, 1, 0], [0, 3, 1]], -60.0)
    for t in (0.0, 0.3, 1.0):
        mu, cov, _, _ = deformed_params(p, t)
        np.testing.assert_allclose(mu, p.mu0, atol=1e-12)
        np.testing.assert_allclose(cov, covariance(p), atol=1e-12)


def test_dynamic_limit_full_deformation():
    p = prim_with([[2, 1, 0], [0, 3, 1]], 60.0)
    mu, _, _, _ = deformed_params(p, 0.5)
    dmu, _, _ = eval_deltas(p.deform, 0.5)
    np.testing.assert_allclose(mu, p.mu0 + dmu, atol=1e-12)


def test_unmodulated_ignores_w():
    p = prim_with([[2, 1, 0]], -5.0)
    mu, _, _, _ = deformed_params(p, 1.0, modulate=False)
    np.testing.assert_allclose(mu, [2, 1, 0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-6, 6), st.floats(0, 1), st.integers(0, 10_000))
def test_canonical_at_t0_and_linear_mean(dl, t, seed):
    p = prim_with(np.random.default_rng(seed).normal(size=(2, 3)), dl, rng=np.random.default_rng(seed))
    mu0, cov0, _, _ = deformed_params(p, 0.0)
    np.testing.assert_array_equal(mu0, p.mu0)
    np.testing.assert_allclose(cov0, covariance(p), atol=1e-12)
    w = 1.0 / (1.0 + np.exp(-dl))
    mu, cov, _, _ = deformed_params(p, t)
    mu1, _, _, _ = deformed_params(p, t, modulate=False)
    np.testing.assert_allclose(mu - p.mu0, w * (mu1 - p.mu0), atol=1e-12)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(cov).min() >= -1e-9


@pytest.mark.parametrize("t", [0.3, 0.9])
def test_backward_matches_finite_differences(rng, t):
    scene = random_scene(rng, n=4, deform=0.4)
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(4, 3, 3))

    def loss(s):
        c = deform_scene(s, t)
        return float(np.sum(A * c.mu) + np.sum(B * c.cov))

    c = deform_scene(scene, t)
    g = deform_backward(c, A, B)
    h = 1e-6
    for k in ("mu0", "log_scale", "rotation", "dyn_logit", "dmu", "dlogs", "drot"):
        arr = getattr(scene, k)
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(scene)
            arr[idx] = old - h
            lm = loss(scene)
            arr[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        np.testing.assert_allclose(g[k], num, rtol=1e-5, atol=1e-7, err_msg=k)
