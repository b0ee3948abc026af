import numpy as np
import pytest

from splat4d.imgio import (
    FLOAT_MAGIC,
    ImageFormatError,
    load_float,
    load_mask_png,
    load_png,
    save_float,
    save_mask_png,
    save_png,
    to_uint8,
)


def test_to_uint8_rounding_and_clamp():
    np.testing.assert_array_equal(to_uint8(np.array([-0.5, 0.0, 0.5, 1.0, 2.0])), [0, 0, 128, 255, 255])
    assert to_uint8(np.array([0.2 / 255]))[0] == 0 and to_uint8(np.array([0.6 / 255]))[0] == 1


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    save_png(img, tmp_path / "a.png")
    back = load_png(tmp_path / "a.png")
    np.testing.assert_array_equal(back, to_uint8(img) / 255.0)


def test_mask_png_roundtrip(tmp_path):
    m = np.random.default_rng(1).uniform(size=(6, 4)) > 0.5
    save_mask_png(m, tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), m)


def test_float_dump_layout(tmp_path):
    img = np.random.default_rng(2).uniform(size=(3, 4, 3))
    save_float(img, tmp_path / "a.sddimg")
    raw = (tmp_path / "a.sddimg").read_bytes()
    assert raw[:8] == FLOAT_MAGIC
    assert len(raw) == 8 + 8 + 3 * 4 * 3 * 4
    np.testing.assert_array_equal(load_float(tmp_path / "a.sddimg"), img.astype("<f4"))


def test_float_dump_errors(tmp_path):
    (tmp_path / "x").write_bytes(b"notanimage")
    with pytest.raises(ImageFormatError):
        load_float(tmp_path / "x")
    save_float(np.zeros((2, 2, 3)), tmp_path / "y")
    (tmp_path / "y").write_bytes((tmp_path / "y").read_bytes()[:-4])
    with pytest.raises(ImageFormatError):
        load_float(tmp_path / "y")
