"""Per-patch uncertainty estimation and the binary motion mask derived from it.

For every patch the residual r = min(1, 2 - 2 cos(f_render, f_target)) of two
feature vectors is explained by a learnable sigma through

    loss = r / (2 sigma^2) + lambda_prior * ln(sigma)

whose minimizer is sigma^2 = r / lambda_prior.  A patch is flagged
(mask = 1) when 1 / (2 sigma^2) > 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .render import ContractError

FEATURE_MAGIC = b"SDDFEATv1"


class FeatureExtractor(Protocol):
    patch_size: int
    feature_dim: int

    def __call__(self, image: np.ndarray) -> np.ndarray: ...


def grid_shape(height: int, width: int, patch: int) -> tuple[int, int]:
    return -(-height // patch), -(-width // patch)


def _patch_sum(x, patch, ph, pw):
    # x: (ph*patch, pw*patch, ...) -> (ph, pw, ...)
    tail = x.shape[2:]
    return x.reshape(ph, patch, pw, patch, *tail).sum(axis=(1, 3))


@dataclass
class PatchStatsExtractor:
    """Mean RGB, std RGB, mean |d/dx|, mean |d/dy| per patch (8 dims).

    Image differences are taken only between pixel pairs inside one patch.
    """

    patch_size: int = 8
    feature_dim: int = 8

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        H, W = img.shape[:2]
        p = self.patch_size
        if H < p or W < p:
            raise ContractError(f"image {H}x{W} smaller than patch size {p}")
        ph, pw = grid_shape(H, W, p)
        Hp, Wp = ph * p, pw * p
        pad = np.zeros((Hp, Wp, 3))
        pad[:H, :W] = img
        valid = np.zeros((Hp, Wp))
        valid[:H, :W] = 1.0

        n = _patch_sum(valid, p, ph, pw)
        mean = _patch_sum(pad, p, ph, pw) / n[..., None]
        sq = _patch_sum(pad * pad, p, ph, pw) / n[..., None]
        std = np.sqrt(np.maximum(sq - mean * mean, 0.0))

        # horizontal pairs (x, x+1) inside the same patch
        gx = np.zeros((Hp, Wp))
        vx = np.zeros((Hp, Wp))
        gx[:, :-1] = np.abs(pad[:, 1:] - pad[:, :-1]).mean(axis=2)
        vx[:, :-1] = valid[:, 1:] * valid[:, :-1]
        vx[:, p - 1::p] = 0.0
        gy = np.zeros((Hp, Wp))
        vy = np.zeros((Hp, Wp))
        gy[:-1] = np.abs(pad[1:] - pad[:-1]).mean(axis=2)
        vy[:-1] = valid[1:] * valid[:-1]
        vy[p - 1::p] = 0.0
        nx = _patch_sum(vx, p, ph, pw)
        ny = _patch_sum(vy, p, ph, pw)
        mgx = np.where(nx > 0, _patch_sum(gx * vx, p, ph, pw) / np.maximum(nx, 1), 0.0)
        mgy = np.where(ny > 0, _patch_sum(gy * vy, p, ph, pw) / np.maximum(ny, 1), 0.0)
        return np.concatenate([mean, std, mgx[..., None], mgy[..., None]], axis=2)


def extract_features(extractor: FeatureExtractor, image: np.ndarray) -> np.ndarray:
    return extractor(image)


def save_features(features: np.ndarray, path) -> None:
    f = np.asarray(features, dtype="<f4")
    if f.ndim != 3:
        raise ContractError("features must be (P_h, P_w, dim)")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<3I", *f.shape))
        fh.write(f.tobytes(order="C"))


def load_features(path, expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(FEATURE_MAGIC):
        raise ContractError(f"{path}: not a feature file (bad header)")
    off = len(FEATURE_MAGIC)
    ph, pw, dim = struct.unpack_from("<3I", data, off)
    off += 12
    body = np.frombuffer(data, dtype="<f4", offset=off)
    if body.size != ph * pw * dim:
        raise ContractError(f"{path}: payload has {body.size} floats, header says {ph}x{pw}x{dim}")
    feats = body.reshape(ph, pw, dim).astype(np.float64)
    if expect_shape is not None and (ph, pw) != tuple(expect_shape):
        raise ContractError(f"{path}: feature grid {(ph, pw)} does not match patch grid {tuple(expect_shape)}")
    return feats


@dataclass
class FileFeatureExtractor:
    """Serves precomputed features; ``key`` selects the file for an image."""

    paths: dict
    patch_size: int
    feature_dim: int

    def load(self, key, grid: tuple[int, int]) -> np.ndarray:
        f = load_features(self.paths[key], expect_shape=grid)
        if f.shape[2] != self.feature_dim:
            raise ContractError(f"feature dim {f.shape[2]} != {self.feature_dim}")
        return f


def cosine_similarity(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Per-patch cosine similarity.

    Two zero vectors count as identical (1).  A zero vector against a
    non-zero one shares no direction and scores 0.
    """
    na = np.linalg.norm(fa, axis=-1)
    nb = np.linalg.norm(fb, axis=-1)
    za, zb = na == 0, nb == 0
    cos = np.sum(fa * fb, axis=-1) / np.where(za | zb, 1.0, na * nb)
    cos = np.clip(cos, -1.0, 1.0)
    cos = np.where(za & zb, 1.0, cos)
    return np.where(za ^ zb, 0.0, cos)


def feature_residual(feat_render: np.ndarray, feat_target: np.ndarray) -> np.ndarray:
    """min(1, 2 - 2 cos) per patch."""
    if feat_render.shape != feat_target.shape:
        raise ContractError(f"feature grids differ: {feat_render.shape} vs {feat_target.shape}")
    return np.minimum(1.0, 2.0 - 2.0 * cosine_similarity(feat_render, feat_target))


@dataclass
class UncertaintyField:
    log_sigma: np.ndarray  # (P_h, P_w)
    lambda_prior: float = 0.5
    patch_size: int = 8
    height: int = 0
    width: int = 0

    @classmethod
    def create(cls, height: int, width: int, patch_size: int = 8, lambda_prior: float = 0.5,
               sigma0: float = 1.0) -> "UncertaintyField":
        ph, pw = grid_shape(height, width, patch_size)
        return cls(np.full((ph, pw), np.log(sigma0)), lambda_prior, patch_size, height, width)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def grid(self) -> tuple[int, int]:
        return self.log_sigma.shape

    def copy(self) -> "UncertaintyField":
        return UncertaintyField(self.log_sigma.copy(), self.lambda_prior, self.patch_size, self.height, self.width)


def uncertainty_loss(feat_render, feat_target, field: UncertaintyField, grad: bool = False):
    """Mean over patches of r / (2 sigma^2) + lambda_prior * ln(sigma).

    The gradient (optional) is w.r.t. log sigma only; features are constants.
    """
    r = feature_residual(np.asarray(feat_render), np.asarray(feat_target))
    if r.shape != field.grid:
        raise ContractError(f"feature grid {r.shape} != sigma grid {field.grid}")
    inv2 = np.exp(-2.0 * field.log_sigma)
    per = 0.5 * r * inv2 + field.lambda_prior * field.log_sigma
    if not grad:
        return float(per.mean())
    return float(per.mean()), (field.lambda_prior - r * inv2) / r.size


def optimize_sigma(field: UncertaintyField, residual: np.ndarray, steps: int = 20, lr: float = 0.1) -> None:
    """Gradient steps on log sigma, independently per patch (in place)."""
    lam = field.lambda_prior
    s = field.log_sigma
    for _ in range(steps):
        s -= lr * (lam - residual * np.exp(-2.0 * s))


def closed_form_sigma(residual, lambda_prior: float):
    """argmin over sigma: sigma^2 = r / lambda_prior."""
    return np.sqrt(np.asarray(residual, dtype=np.float64) / lambda_prior)


def mask_indicator(sigma_sq) -> np.ndarray:
    """1 / (2 sigma^2) > 1, i.e. dynamic iff sigma^2 < 1/2 (strict)."""
    return 0.5 / np.asarray(sigma_sq, dtype=np.float64) > 1.0


def patch_mask(field: UncertaintyField) -> np.ndarray:
    """Patch-level indicator of the field."""
    return mask_indicator(np.exp(2.0 * field.log_sigma))


def make_mask(field: UncertaintyField, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Pixel mask (H, W) of uint8 0/1, patches upsampled nearest-neighbour."""
    H = height or field.height
    W = width or field.width
    pm = patch_mask(field).astype(np.uint8)
    p = field.patch_size
    return np.repeat(np.repeat(pm, p, axis=0), p, axis=1)[:H, :W]


def mask_iou(pred, truth) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)
