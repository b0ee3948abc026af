"""Time-conditioned Gaussian rendering with a full adjoint pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import raster
from .deformation import DeformCache, deform_backward, deform_scene
from .projection import ProjCache, project_backward, project_gaussians
from .scene import PARAM_NAMES, Camera, GaussianSet, sigmoid

TILE = 16


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


@dataclass
class ContributionLog:
    """Per-pixel ordered (gaussian_index, blend weight) records.

    Stored compactly as the sorted, culled primitive arrays the kernel
    consumed; :meth:`pixel` replays the compositing of one pixel exactly.
    """

    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    order: np.ndarray
    bbox: np.ndarray
    global_index: np.ndarray
    n_contrib: np.ndarray

    def pixel(self, y: int, x: int) -> list[tuple[int, float]]:
        out = []
        T = 1.0
        for i in self.order:
            x0, x1, y0, y1 = self.bbox[i]
            if x < x0 or x > x1 or y < y0 or y > y1:
                continue
            dx = x - self.mean2d[i, 0]
            dy = y - self.mean2d[i, 1]
            c = self.conic[i]
            p = math.exp(-0.5 * (c[0] * dx * dx + c[2] * dy * dy) - c[1] * dx * dy)
            a = min(raster.fallback.MAX_ALPHA, self.opacity[i] * p)
            if a < raster.fallback.MIN_ALPHA:
                continue
            out.append((int(self.global_index[i]), a * T))
            T *= 1.0 - a
            if T < raster.fallback.T_EPS:
                break
        return out


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    weight_sum: np.ndarray  # (H, W) sum of blend weights
    contribution_log: ContributionLog
    diagnostics: dict = field(default_factory=dict)
    # adjoint context
    _scene: GaussianSet | None = None
    _indices: np.ndarray | None = None
    _n_total: int = 0
    _deform: DeformCache | None = None
    _proj: ProjCache | None = None
    _camera: Camera | None = None
    _background: np.ndarray | None = None
    _backend: str = ""


def _bboxes(mean2d, cov2d, opacity, valid, H, W):
    n = mean2d.shape[0]
    box = np.empty((n, 4), dtype=np.int32)
    box[:] = (1, 0, 1, 0)  # empty
    ok = valid & (opacity >= 1.0 / 255.0)
    if not ok.any():
        return box
    qmax = 2.0 * np.log(255.0 * opacity[ok])
    rx = np.sqrt(np.maximum(qmax * cov2d[ok, 0, 0], 0.0))
    ry = np.sqrt(np.maximum(qmax * cov2d[ok, 1, 1], 0.0))
    u, v = mean2d[ok, 0], mean2d[ok, 1]
    x0 = np.maximum(np.floor(u - rx) - 1, 0)
    x1 = np.minimum(np.ceil(u + rx) + 1, W - 1)
    y0 = np.maximum(np.floor(v - ry) - 1, 0)
    y1 = np.minimum(np.ceil(v + ry) + 1, H - 1)
    box[ok] = np.stack([x0, x1, y0, y1], axis=1).astype(np.int32)
    return box


def _resolve_subset(scene: GaussianSet, subset_filter) -> np.ndarray:
    n = len(scene)
    if subset_filter is None:
        return np.arange(n)
    if callable(subset_filter):
        sel = np.asarray(subset_filter(scene.w), dtype=bool)
        if sel.shape != (n,):
            raise ContractError("subset_filter must return one bool per Gaussian")
        return np.flatnonzero(sel)
    arr = np.asarray(subset_filter)
    if arr.dtype == bool:
        return np.flatnonzero(arr)
    return np.sort(arr.astype(np.intp))


def render(
    scene: GaussianSet,
    camera: Camera,
    t: float,
    subset_filter: Callable | np.ndarray | None = None,
    background=(0.0, 0.0, 0.0),
    modulate: bool = True,
    backend: str | None = None,
    nthreads: int = 1,
) -> RenderOutput:
    """Render ``scene`` at time ``t``.

    ``subset_filter`` is a predicate on the vector of dynamic coefficients w
    (or an index / boolean array); only the selected Gaussians are drawn.
    Selection happens before any computation, so the result is identical to
    rendering a physically filtered copy of the scene.
    """
    H, W = camera.height, camera.width
    bg = np.ascontiguousarray(background, dtype=np.float64).reshape(3)
    indices = _resolve_subset(scene, subset_filter)
    sub = scene.subset(indices)
    kern = raster.get_backend(backend)
    name = backend or raster.DEFAULT_BACKEND

    if len(sub) == 0:
        image = np.broadcast_to(bg, (H, W, 3)).copy()
        empty = np.zeros((0, 2))
        log = ContributionLog(empty, np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64),
                              np.zeros((0, 4), dtype=np.int32), indices, np.zeros((H, W), np.int32))
        return RenderOutput(image, np.ones((H, W)), np.zeros((H, W)), log,
                            {"culled": 0, "degenerate": 0, "drawn": 0},
                            sub, indices, len(scene), None, None, camera, bg, name)

    dc = deform_scene(sub, t, modulate)
    pc = project_gaussians(dc.mu, dc.cov, camera)
    opacity = sigmoid(sub.opacity_logit)
    valid_idx = np.flatnonzero(pc.valid)
    depth = pc.p_cam[valid_idx, 2]
    order = np.ascontiguousarray(valid_idx[np.argsort(depth, kind="stable")], dtype=np.int64)
    box = _bboxes(pc.mean2d, pc.cov2d, opacity, pc.valid, H, W)
    mean2d = np.ascontiguousarray(pc.mean2d)
    conic = np.ascontiguousarray(pc.conic)
    color = np.ascontiguousarray(sub.color)
    image, trans, wsum, ncon = kern.forward(mean2d, conic, opacity, color, order, box, H, W, bg,
                                            TILE, nthreads)
    log = ContributionLog(mean2d, conic, opacity, order, box, indices, ncon)
    diag = {
        "culled": int((~pc.valid).sum()) - pc.degenerate,
        "degenerate": pc.degenerate,
        "drawn": int(order.size),
    }
    return RenderOutput(image, trans, wsum, log, diag, sub, indices, len(scene), dc, pc, camera, bg, name)


def zero_grads(n: int, degree: int) -> dict[str, np.ndarray]:
    shapes = {
        "mu0": (n, 3), "log_scale": (n, 3), "rotation": (n, 4), "color": (n, 3),
        "opacity_logit": (n,), "dyn_logit": (n,),
        "dmu": (n, degree, 3), "dlogs": (n, degree, 3), "drot": (n, degree, 3),
    }
    return {k: np.zeros(shapes[k]) for k in PARAM_NAMES}


def render_backward(output: RenderOutput, d_image: np.ndarray, into: dict | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode derivatives of a render w.r.t. every scene parameter.

    Returns full-scene arrays (Gaussians outside the rendered subset get 0).
    When ``into`` is given the gradients are accumulated there instead.
    """
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != output.image.shape:
        raise ContractError(f"dL/dimage shape {d_image.shape} != image shape {output.image.shape}")
    sub = output._scene
    n_total = output._n_total
    degree = sub.degree if sub is not None else 1
    grads = into if into is not None else zero_grads(n_total, degree)
    if sub is None or len(sub) == 0 or output._proj is None:
        return grads
    log = output.contribution_log
    cam = output._camera
    kern = raster.get_backend(output._backend)
    g_mean2d, g_conic, g_op, g_col = kern.backward(
        log.mean2d, log.conic, log.opacity, np.ascontiguousarray(sub.color), log.order, log.bbox,
        cam.height, cam.width, output._background, np.ascontiguousarray(d_image), TILE,
    )
    g_mu, g_cov = project_backward(output._proj, g_mean2d, g_conic)
    g = deform_backward(output._deform, g_mu, g_cov)
    g["color"] = g_col
    g["opacity_logit"] = g_op * log.opacity * (1.0 - log.opacity)
    idx = output._indices
    for k in PARAM_NAMES:
        grads[k][idx] += g[k]  # idx is sorted and unique
    return grads
