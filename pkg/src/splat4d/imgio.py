"""Image and mask file IO."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FLOAT_MAGIC = b"SDDIMGv1"


class ImageFormatError(ValueError):
    pass


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask_png(mask: np.ndarray, path) -> None:
    m = (np.asarray(mask) != 0).astype(np.uint8) * 255
    Image.fromarray(m, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_float(image: np.ndarray, path) -> None:
    """Exact dump: 8-byte magic, uint32 H and W, then float32 little-endian H*W*3."""
    img = np.ascontiguousarray(image, dtype="<f4")
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAGIC)
        fh.write(struct.pack("<2I", H, W))
        fh.write(img.tobytes())


def load_float(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(FLOAT_MAGIC):
        raise ImageFormatError(f"{path}: missing float image header")
    H, W = struct.unpack_from("<2I", data, len(FLOAT_MAGIC))
    body = np.frombuffer(data, dtype="<f4", offset=len(FLOAT_MAGIC) + 8)
    if body.size != H * W * 3:
        raise ImageFormatError(f"{path}: expected {H * W * 3} values, found {body.size}")
    return body.reshape(H, W, 3).astype(np.float64)
