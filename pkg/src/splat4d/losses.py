"""Training objective terms and their adjoints.

Every image loss returns ``(value, dvalue/d(first image))``; the second
image is always the fixed target.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .render import ContractError
from .scene import sigmoid

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
W_CLAMP = 1e-7


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1_loss(a, b, grad: bool = False):
    """Mean absolute difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    diff = a - b
    val = float(np.mean(np.abs(diff)))
    if not grad:
        return val
    return val, np.sign(diff) / diff.size


def _gauss_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


_WIN = _gauss_window()
_BAND_CACHE: dict[int, np.ndarray] = {}


def _band(n: int) -> np.ndarray:
    # (n, n) matrix of zero-padded "same" correlation with the window
    m = _BAND_CACHE.get(n)
    if m is None:
        r = SSIM_WINDOW // 2
        m = np.zeros((n, n))
        for k in range(-r, r + 1):
            m += np.eye(n, k=k) * _WIN[k + r]
        _BAND_CACHE[n] = m
    return m


def _blur(x):
    # separable Gaussian filter over the two spatial axes, trailing axes batched
    H, W = x.shape[:2]
    y = (_band(H) @ x.reshape(H, -1)).reshape(H, W, -1)
    z = np.ascontiguousarray(y.transpose(1, 0, 2)).reshape(W, -1)
    out = (_band(W) @ z).reshape(W, H, -1).transpose(1, 0, 2)
    return out.reshape(x.shape)


def ssim(a, b, grad: bool = False):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).

    With ``grad`` also returns dSSIM/da.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images at least {SSIM_WINDOW}px on each side, got {a.shape[:2]}")
    mu1, mu2, e11, e22, e12 = _blur(np.stack([a, b, a * a, b * b, a * b], axis=-1)).transpose(-1, *range(a.ndim))
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    n1 = 2 * mu1 * mu2 + SSIM_C1
    n2 = 2 * s12 + SSIM_C2
    d1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    d2 = s11 + s22 + SSIM_C2
    smap = (n1 * n2) / (d1 * d2)
    val = float(smap.mean())
    if not grad:
        return val
    k = 1.0 / smap.size
    dd = d1 * d2
    g_s12 = k * 2 * n1 / dd
    g_s11 = -k * smap / d2
    g_mu1 = k * (2 * mu2 * n2 / dd - 2 * mu1 * smap / d1) - 2 * mu1 * g_s11 - mu2 * g_s12
    b1, b11, b12 = _blur(np.stack([g_mu1, g_s11, g_s12], axis=-1)).transpose(-1, *range(a.ndim))
    ga = b1 + 2 * a * b11 + b * b12
    return val, ga


def ssim_loss(a, b, grad: bool = False):
    """D-SSIM = (1 - SSIM) / 2."""
    if not grad:
        return (1.0 - ssim(a, b)) / 2.0
    s, gs = ssim(a, b, grad=True)
    return (1.0 - s) / 2.0, -0.5 * gs


def binary_entropy(w):
    """Bernoulli entropy in nats, elementwise."""
    w = np.clip(np.asarray(w, dtype=np.float64), W_CLAMP, 1.0 - W_CLAMP)
    out = -(w * np.log(w) + (1.0 - w) * np.log1p(-w))
    return out if out.ndim else float(out)


def binary_entropy_grad(w):
    """d(entropy)/dw = ln((1 - w) / w)."""
    w = np.clip(np.asarray(w, dtype=np.float64), W_CLAMP, 1.0 - W_CLAMP)
    return np.log1p(-w) - np.log(w)


def scene_entropy(dyn_logit, grad: bool = False):
    """Mean entropy over all Gaussians, optionally with d/d(dyn_logit)."""
    dyn_logit = np.asarray(dyn_logit, dtype=np.float64)
    w = sigmoid(dyn_logit)
    val = float(np.mean(binary_entropy(w)))
    if not grad:
        return val
    return val, binary_entropy_grad(w) * w * (1.0 - w) / w.size


def lambda_bi(step: int, rate: float) -> float:
    """Progressive weight 1 - exp(-rate * step)."""
    if rate <= 0:
        raise ContractError("schedule rate must be > 0")
    return -math.expm1(-rate * step)


def _masked_branch(render, target, mask, grad):
    # L1 weighted per pixel + D-SSIM on the mask-multiplied images
    m = mask[..., None]
    diff = render - target
    l1 = float(np.mean(m * np.abs(diff)))
    if not grad:
        return l1 + ssim_loss(render * m, target * m)
    g_l1 = m * np.sign(diff) / diff.size
    ds, g_ds = ssim_loss(render * m, target * m, grad=True)
    return l1 + ds, g_l1 + m * g_ds


def asg_loss(img_static, img_dynamic, target, mask, grad: bool = False):
    """Masked supervision: static render where mask=0, dynamic render where mask=1."""
    img_static = np.asarray(img_static, dtype=np.float64)
    img_dynamic = np.asarray(img_dynamic, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(img_static, target)
    _check_pair(img_dynamic, target)
    mask = np.asarray(mask)
    if mask.shape != target.shape[:2]:
        raise ContractError(f"mask shape {mask.shape} != image size {target.shape[:2]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask must be binary")
    m = mask.astype(np.float64)
    if not grad:
        return _masked_branch(img_static, target, 1.0 - m, False) + _masked_branch(img_dynamic, target, m, False)
    vs, gs = _masked_branch(img_static, target, 1.0 - m, True)
    vd, gd = _masked_branch(img_dynamic, target, m, True)
    return vs + vd, gs, gd


@dataclass
class LossBreakdown:
    l_recon: float
    l_bi: float
    lambda_bi: float
    l_asg: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)

    def check(self, tol: float = 1e-7) -> None:
        terms = (self.l_recon, self.l_bi, self.lambda_bi, self.l_asg, self.total)
        if not all(math.isfinite(v) for v in terms):
            raise FloatingPointError(f"non-finite loss term in {self}")
        expect = self.l_recon + self.lambda_bi * self.l_bi + self.l_asg
        if abs(self.total - expect) > tol:
            raise AssertionError(f"loss decomposition broken: {self.total} vs {expect}")


@dataclass
class LossGrads:
    d_full: np.ndarray
    d_static: np.ndarray | None
    d_dynamic: np.ndarray | None
    d_dyn_logit: np.ndarray


def total_loss(
    dyn_logit,
    target,
    img_full,
    img_static=None,
    img_dynamic=None,
    mask=None,
    step: int = 0,
    *,
    ssim_weight: float = 0.2,
    schedule_rate: float = 1e-4,
    use_lbi: bool = True,
    use_schedule: bool = True,
    use_asg: bool = True,
    asg_weight: float = 1.0,
    grad: bool = True,
):
    """Full objective: reconstruction + lambda_bi * entropy + masked supervision.

    The asg term carries ``asg_weight`` (1 by default); ``l_asg`` in the
    breakdown is the weighted value so the decomposition identity holds.
    Returns (LossBreakdown, LossGrads) or just the breakdown.
    """
    l1, g_l1 = l1_loss(img_full, target, grad=True)
    ds, g_ds = ssim_loss(img_full, target, grad=True)
    l_recon = l1 + ssim_weight * ds
    d_full = g_l1 + ssim_weight * g_ds

    l_bi, g_bi = scene_entropy(dyn_logit, grad=True)
    if use_lbi:
        lam = lambda_bi(step, schedule_rate) if use_schedule else 1.0
    else:
        lam = 0.0

    d_static = d_dynamic = None
    l_asg = 0.0
    if use_asg:
        if img_static is None or img_dynamic is None or mask is None:
            raise ContractError("asg term needs static and dynamic renders and a mask")
        l_asg, d_static, d_dynamic = asg_loss(img_static, img_dynamic, target, mask, grad=True)
        l_asg *= asg_weight
        d_static = d_static * asg_weight
        d_dynamic = d_dynamic * asg_weight

    total = l_recon + lam * l_bi + l_asg
    br = LossBreakdown(l_recon, l_bi, lam, l_asg, total)
    if not grad:
        return br
    return br, LossGrads(d_full, d_static, d_dynamic, lam * g_bi)
