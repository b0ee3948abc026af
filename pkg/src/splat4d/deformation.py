"""Time-dependent deformation with coefficient-modulated application.

Each Gaussian carries polynomial coefficients for a mean offset, a log-scale
offset and a rotation-vector increment, all with no constant term so that
t = 0 is the canonical configuration.  The dynamic coefficient w scales the
increments in parameter space:

    mu'    = mu0 + w * dmu(t)
    scale' = exp(log_scale + w * dlogs(t))
    q'     = normalize(q * quat(w * drot(t)))

which keeps the covariance PSD for every w in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import (
    DeformCoeffs,
    GaussianPrimitive,
    GaussianSet,
    quat_mul,
    quat_to_rotmat,
    sigmoid,
)

_SMALL_ANGLE = 1e-2


def poly_basis(t: float, degree: int) -> np.ndarray:
    """[t, t**2, ..., t**degree]."""
    return float(t) ** np.arange(1, degree + 1, dtype=np.float64)


def eval_deltas(coeffs: DeformCoeffs, t: float):
    """(delta_mu, delta_log_scale, delta_rotvec) at normalized time t."""
    b = poly_basis(t, coeffs.degree)
    return b @ coeffs.dmu, b @ coeffs.dlogs, b @ coeffs.drot


def rotvec_to_quat(v):
    """Quaternion of a rotation vector, smooth through v = 0."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    f = _half_sinc(theta)
    return np.concatenate([np.cos(0.5 * theta)[..., None], f[..., None] * v], axis=-1)


def _half_sinc(theta):
    # sin(theta/2) / theta
    theta = np.asarray(theta, dtype=np.float64)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta
    return np.where(small, 0.5 - th2 / 48.0 + th2 * th2 / 3840.0, np.sin(0.5 * safe) / safe)


def _half_sinc_dlog(theta):
    # f'(theta) / theta for f = _half_sinc
    theta = np.asarray(theta, dtype=np.float64)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    h = 0.5 * safe
    big = (h * np.cos(h) - np.sin(h)) / safe**3
    return np.where(small, -1.0 / 24.0 + theta * theta / 960.0, big)


def _left_matrix(q):
    # q (x) p == L(q) @ p
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, -z, y], -1),
            np.stack([y, z, w, -x], -1),
            np.stack([z, -y, x, w], -1),
        ],
        -2,
    )


def _right_matrix(p):
    # q (x) p == Rm(p) @ q
    w, x, y, z = np.moveaxis(p, -1, 0)
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, z, -y], -1),
            np.stack([y, -z, w, x], -1),
            np.stack([z, y, -x, w], -1),
        ],
        -2,
    )


def rotmat_grad_to_quat(q, dR):
    """Pull dL/dR back to dL/dq for R = quat_to_rotmat(q) (q treated as given)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


@dataclass
class DeformCache:
    """Forward intermediates of :func:`deform_scene`, consumed by the adjoint."""

    t: float
    basis: np.ndarray  # (K,)
    modulate: bool
    w: np.ndarray  # (N,)
    d_mu: np.ndarray
    d_logs: np.ndarray
    d_rot: np.ndarray
    mu: np.ndarray  # deformed mean (N, 3)
    scale: np.ndarray  # deformed scale (N, 3)
    q_in: np.ndarray  # stored rotation (N, 4)
    delta_q: np.ndarray
    q_raw: np.ndarray  # q_in (x) delta_q, before normalization
    q_norm: np.ndarray  # (N,)
    q: np.ndarray  # deformed unit quaternion
    R: np.ndarray  # (N, 3, 3)
    M: np.ndarray  # R diag(scale)
    cov: np.ndarray  # (N, 3, 3)


def deform_scene(scene: GaussianSet, t: float, modulate: bool = True) -> DeformCache:
    """Deformed means and covariances of every Gaussian at time t.

    ``modulate=False`` applies the raw deformation (w treated as 1), which is
    the plain time-conditioned model without a dynamic coefficient.
    """
    basis = poly_basis(t, scene.degree)
    w = sigmoid(scene.dyn_logit) if modulate else np.ones(len(scene))
    d_mu = np.einsum("nkc,k->nc", scene.dmu, basis)
    d_logs = np.einsum("nkc,k->nc", scene.dlogs, basis)
    d_rot = np.einsum("nkc,k->nc", scene.drot, basis)
    wc = w[:, None]
    mu = scene.mu0 + wc * d_mu
    scale = np.exp(scene.log_scale + wc * d_logs)
    delta_q = rotvec_to_quat(wc * d_rot)
    q_raw = quat_mul(scene.rotation, delta_q)
    q_norm = np.linalg.norm(q_raw, axis=1)
    q = q_raw / q_norm[:, None]
    R = quat_to_rotmat(q)
    M = R * scale[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    return DeformCache(t, basis, modulate, w, d_mu, d_logs, d_rot, mu, scale,
                       scene.rotation, delta_q, q_raw, q_norm, q, R, M, cov)


def deform_backward(cache: DeformCache, g_mu: np.ndarray, g_cov: np.ndarray) -> dict[str, np.ndarray]:
    """Adjoint of :func:`deform_scene`.

    ``g_mu`` is dL/dmu' (N, 3), ``g_cov`` dL/dSigma' (N, 3, 3) as a full-matrix
    gradient.  Returns gradients for mu0, log_scale, rotation, dyn_logit and
    the three deformation blocks.
    """
    w = cache.w
    wc = w[:, None]
    g_cov = 0.5 * (g_cov + np.swapaxes(g_cov, 1, 2))
    g_M = 2.0 * g_cov @ cache.M
    g_scale = np.einsum("nij,nij->nj", cache.R, g_M)
    g_R = g_M * cache.scale[:, None, :]

    g_q = rotmat_grad_to_quat(cache.q, g_R)
    q = cache.q
    g_qraw = (g_q - q * np.sum(q * g_q, axis=1, keepdims=True)) / cache.q_norm[:, None]
    g_qin = np.einsum("nji,nj->ni", _right_matrix(cache.delta_q), g_qraw)
    g_dq = np.einsum("nji,nj->ni", _left_matrix(cache.q_in), g_qraw)

    v = wc * cache.d_rot
    theta = np.linalg.norm(v, axis=1)
    f = _half_sinc(theta)
    g = _half_sinc_dlog(theta)
    g_v = (-0.5 * f * g_dq[:, 0])[:, None] * v + f[:, None] * g_dq[:, 1:] \
        + (g * np.sum(v * g_dq[:, 1:], axis=1))[:, None] * v

    g_logs_total = g_scale * cache.scale  # d/d(log_scale + w*dlogs)

    out = {
        "mu0": g_mu.copy(),
        "log_scale": g_logs_total,
        "rotation": g_qin,
    }
    g_dmu_t = wc * g_mu
    g_dlogs_t = wc * g_logs_total
    g_drot_t = wc * g_v
    b = cache.basis
    out["dmu"] = g_dmu_t[:, None, :] * b[None, :, None]
    out["dlogs"] = g_dlogs_t[:, None, :] * b[None, :, None]
    out["drot"] = g_drot_t[:, None, :] * b[None, :, None]
    if cache.modulate:
        g_w = (np.sum(cache.d_mu * g_mu, axis=1) + np.sum(cache.d_logs * g_logs_total, axis=1)
               + np.sum(cache.d_rot * g_v, axis=1))
        out["dyn_logit"] = g_w * w * (1.0 - w)
    else:
        out["dyn_logit"] = np.zeros_like(w)
    return out


def deformed_params(prim: GaussianPrimitive, t: float, modulate: bool = True):
    """(mu', Sigma', scale', rotation') of a single primitive at time t."""
    scene = GaussianSet.from_primitives([prim])
    c = deform_scene(scene, t, modulate)
    return c.mu[0], c.cov[0], c.scale[0], c.q[0]
