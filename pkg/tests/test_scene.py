import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d.scene import (
    Camera,
    DeformCoeffs,
    GaussianPrimitive,
    GaussianSet,
    SceneFormatError,
    SceneVersionError,
    covariance,
    dyn_coeff,
    init_random_scene,
    load_camera,
    load_scene,
    quat_normalize,
    save_camera,
    save_scene,
    scene_to_dict,
)

from conftest import random_scene


def prim(log_scale=(0.0, 0.0, 0.0), rotation=(1.0, 0.0, 0.0, 0.0), dyn_logit=0.0):
    return GaussianPrimitive(np.zeros(3), np.array(log_scale), np.array(rotation), np.full(3, 0.5), 0.0, dyn_logit)


def test_covariance_identity():
    np.testing.assert_allclose(covariance(prim()), np.eye(3), atol=1e-15)


def test_covariance_axis_scale():
    np.testing.assert_allclose(covariance(prim((math.log(2), 0, 0))), np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_rotated_90_about_z():
    h = math.sqrt(0.5)
    np.testing.assert_allclose(covariance(prim((math.log(2), 0, 0), (h, 0, 0, h))), np.diag([1.0, 4, 1]), atol=1e-12)


def test_dyn_coeff_values():
    assert dyn_coeff(prim(dyn_logit=0.0)) == 0.5
    assert dyn_coeff(prim(dyn_logit=2.0)) == pytest.approx(0.8807970779778823, abs=1e-12)
    assert dyn_coeff(prim(dyn_logit=800.0)) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_covariance_symmetric_psd(ls, q):
    c = covariance(prim(ls, quat_normalize(np.array(q))))
    np.testing.assert_allclose(c, c.T, atol=1e-12)
    assert np.linalg.eigvalsh(c).min() >= -1e-9


def test_scene_roundtrip_bit_exact(tmp_path, rng):
    s = random_scene(rng, n=3)
    save_scene(s, tmp_path / "s.json")
    r = load_scene(tmp_path / "s.json")
    for k, v in s.params().items():
        assert np.array_equal(v, r.params()[k]), k


def test_missing_rotation_names_field(tmp_path, rng):
    d = scene_to_dict(random_scene(rng, n=2))
    del d["primitives"][1]["rotation"]
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(SceneFormatError, match=r"primitives\[1\]\.rotation"):
        load_scene(tmp_path / "s.json")


def test_non_unit_quaternion_renormalized_with_warning(tmp_path, rng):
    d = scene_to_dict(random_scene(rng, n=1))
    d["primitives"][0]["rotation"] = [2.0, 0.0, 0.0, 0.0]
    (tmp_path / "s.json").write_text(json.dumps(d))
    notes = []
    with pytest.warns(UserWarning):
        s = load_scene(tmp_path / "s.json", warnings_out=notes)
    assert len(notes) == 1
    np.testing.assert_allclose(np.linalg.norm(s.rotation[0]), 1.0, atol=1e-12)


def test_version_mismatch(tmp_path, rng):
    d = scene_to_dict(random_scene(rng, n=1))
    d["version"] = "splat4d-scene/99"
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(SceneVersionError):
        load_scene(tmp_path / "s.json")


def test_malformed_json_reports_line(tmp_path):
    (tmp_path / "s.json").write_text('{\n "version": \n')
    with pytest.raises(SceneFormatError, match="line"):
        load_scene(tmp_path / "s.json")


def test_camera_roundtrip_and_validation(tmp_path):
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, -1, 0], 40, 30, 50.0)
    save_camera(cam, tmp_path / "c.json")
    c2 = load_camera(tmp_path / "c.json")
    assert np.array_equal(c2.world_to_cam, cam.world_to_cam)
    assert (c2.width, c2.height, c2.fx) == (40, 30, 50.0)
    with pytest.raises(ValueError):
        Camera(10, 10, -1.0, 1.0, 5, 5, np.hstack([np.eye(3), np.zeros((3, 1))]))
    with pytest.raises(ValueError):
        Camera(10, 10, 1.0, 1.0, 5, 5, np.hstack([np.eye(3), np.zeros((3, 1))]), near=2.0, far=1.0)


def test_random_init_defaults(rng):
    s = init_random_scene(50, [-1, -1, 2], [1, 1, 4], rng)
    assert np.all((s.mu0 >= [-1, -1, 2]) & (s.mu0 <= [1, 1, 4]))
    np.testing.assert_allclose(s.log_scale, math.log(0.05 * 2.0))
    np.testing.assert_allclose(s.w, 0.5)
    np.testing.assert_allclose(s.opacity, 0.1)
    assert not s.dmu.any() and not s.dlogs.any() and not s.drot.any()


def test_deform_coeffs_degree():
    assert DeformCoeffs.zeros(3).degree == 3
    with pytest.raises(ValueError):
        DeformCoeffs.zeros(0)


def test_primitives_roundtrip(rng):
    s = random_scene(rng, n=4)
    r = GaussianSet.from_primitives(s.primitives)
    for k, v in s.params().items():
        assert np.array_equal(v, r.params()[k])
