"""Evaluation metrics: PSNR, SSIM, decoupling rates, mask IoU."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import ssim as _ssim
from .render import ContractError
from .uncertainty import mask_iou

PSNR_CAP = 100.0


def _mse(a, b, sel=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shapes differ: {a.shape} vs {b.shape}")
    d = (a - b) ** 2
    if sel is not None:
        d = d[sel]
    return float(d.mean()) if d.size else 0.0


def _psnr_from_mse(mse: float) -> float:
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 100 dB."""
    return _psnr_from_mse(_mse(a, b))


def ssim_metric(a, b) -> float:
    return _ssim(a, b)


def region_psnr(render_img, target, gt_mask) -> dict:
    """PSNR over static (mask 0), dynamic (mask 1) and all pixels.

    An empty region scores the cap.
    """
    m = np.asarray(gt_mask).astype(bool)
    if m.shape != np.asarray(target).shape[:2]:
        raise ContractError(f"mask shape {m.shape} does not match image {np.asarray(target).shape[:2]}")
    return {
        "static_db": _psnr_from_mse(_mse(render_img, target, ~m)),
        "dynamic_db": _psnr_from_mse(_mse(render_img, target, m)),
        "full_db": psnr(render_img, target),
    }


def decoupling_score(w, labels, tau: float = 0.5) -> dict:
    """Confusion rates of (w >= tau) against binary labels, dynamic = positive.

    Precision with no predicted positives (or recall with no true positives)
    is reported as 1.0 when nothing was missed, else 0.0.
    """
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if w.shape != y.shape:
        raise ContractError(f"{y.size} labels for {w.size} Gaussians")
    pred = w >= tau
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    n = max(y.size, 1)
    precision = tp / (tp + fp) if tp + fp else float(fn == 0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    return {"accuracy": (tp + tn) / n, "precision": precision, "recall": recall}


@dataclass
class EvalReport:
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    region: dict = field(default_factory=dict)
    decoupling: dict = field(default_factory=dict)
    mask_iou: float | None = None
    gap_mass: float = 0.0

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else float("nan")

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr_mean"] = self.psnr_mean
        d["ssim_mean"] = self.ssim_mean
        return d

    def table(self) -> str:
        lines = [f"{'frame':<16}{'PSNR(dB)':>10}{'SSIM':>9}"]
        for name, p, s in zip(self.frames, self.psnr_db, self.ssim):
            lines.append(f"{name:<16}{p:>10.3f}{s:>9.4f}")
        lines.append(f"{'mean':<16}{self.psnr_mean:>10.3f}{self.ssim_mean:>9.4f}")
        if self.region:
            lines.append("region PSNR  static {static_db:.3f}  dynamic {dynamic_db:.3f}  full {full_db:.3f}".format(**self.region))
        if self.decoupling:
            lines.append("decoupling   acc {accuracy:.4f}  prec {precision:.4f}  rec {recall:.4f}".format(**self.decoupling))
        if self.mask_iou is not None:
            lines.append(f"mask IoU     {self.mask_iou:.4f}")
        lines.append(f"gap mass     {self.gap_mass:.4f}")
        return "\n".join(lines)


__all__ = ["psnr", "ssim_metric", "region_psnr", "decoupling_score", "mask_iou", "EvalReport", "PSNR_CAP"]
