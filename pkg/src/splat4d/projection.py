"""Perspective projection of 3D Gaussians to screen-space 2D Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, GaussianPrimitive

DILATION = 0.3
VIEWPORT_PAD = 1.3


@dataclass
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int


@dataclass
class ProjCache:
    valid: np.ndarray  # (N,) bool, survived culling
    degenerate: int  # count skipped for det <= 0
    p_cam: np.ndarray  # (N, 3)
    mean2d: np.ndarray  # (N, 2)
    J: np.ndarray  # (N, 2, 3)
    cov_cam: np.ndarray  # W Sigma W^T, (N, 3, 3)
    cov2d: np.ndarray  # (N, 2, 2), dilated
    conic: np.ndarray  # (N, 3): inverse cov as (a, b, c)
    W: np.ndarray
    fx: float
    fy: float


def project_gaussians(mu: np.ndarray, cov: np.ndarray, cam: Camera) -> ProjCache:
    W = cam.R
    p = mu @ W.T + cam.t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    valid = (z > cam.near) & (z < cam.far)
    zs = np.where(valid, z, 1.0)
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    pad_x = 0.5 * (VIEWPORT_PAD - 1.0) * cam.width
    pad_y = 0.5 * (VIEWPORT_PAD - 1.0) * cam.height
    valid &= (u >= -pad_x) & (u <= cam.width + pad_x) & (v >= -pad_y) & (v <= cam.height + pad_y)

    n = mu.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / (zs * zs)
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / (zs * zs)
    cov_cam = W @ cov @ W.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = a * c - b * b
    degen = valid & ~(det > 0)
    valid &= ~degen
    det_s = np.where(valid, det, 1.0)
    conic = np.stack([c / det_s, -b / det_s, a / det_s], axis=1)
    return ProjCache(valid, int(degen.sum()), p, np.stack([u, v], axis=1), J, cov_cam, cov2d,
                     conic, W, cam.fx, cam.fy)


def project_backward(pc: ProjCache, g_mean2d: np.ndarray, g_conic: np.ndarray):
    """Adjoint of :func:`project_gaussians` -> (dL/dmu, dL/dSigma)."""
    x, y, z = pc.p_cam[:, 0], pc.p_cam[:, 1], pc.p_cam[:, 2]
    z = np.where(pc.valid, z, 1.0)
    K = np.empty((len(z), 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = pc.conic[:, 0], pc.conic[:, 1], pc.conic[:, 1], pc.conic[:, 2]
    GK = np.empty_like(K)
    GK[:, 0, 0] = g_conic[:, 0]
    GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * g_conic[:, 1]
    GK[:, 1, 1] = g_conic[:, 2]
    G2 = -K @ GK @ K  # dL/dcov2d

    J = pc.J
    g_cov_cam = np.swapaxes(J, 1, 2) @ G2 @ J
    g_J = 2.0 * G2 @ J @ pc.cov_cam
    g_cov = pc.W.T @ g_cov_cam @ pc.W

    fx, fy = pc.fx, pc.fy
    gu, gv = g_mean2d[:, 0], g_mean2d[:, 1]
    gx = gu * fx / z - g_J[:, 0, 2] * fx / (z * z)
    gy = gv * fy / z - g_J[:, 1, 2] * fy / (z * z)
    gz = (-gu * fx * x / (z * z) - gv * fy * y / (z * z)
          - g_J[:, 0, 0] * fx / (z * z) - g_J[:, 1, 1] * fy / (z * z)
          + g_J[:, 0, 2] * 2 * fx * x / z**3 + g_J[:, 1, 2] * 2 * fy * y / z**3)
    g_p = np.stack([gx, gy, gz], axis=1)
    g_p[~pc.valid] = 0.0
    g_cov[~pc.valid] = 0.0
    g_mu = g_p @ pc.W
    return g_mu, g_cov


def project(prim: GaussianPrimitive, cam: Camera, t: float, index: int = 0) -> Projected2D | None:
    """Project one time-deformed primitive; None when culled."""
    from .deformation import deformed_params

    mu, cov, _, _ = deformed_params(prim, t)
    pc = project_gaussians(mu[None], cov[None], cam)
    if not pc.valid[0]:
        return None
    return Projected2D(pc.mean2d[0].copy(), pc.cov2d[0].copy(), float(pc.p_cam[0, 2]), index)
