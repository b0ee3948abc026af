"""Pure numpy rasterizer: same compositing rules as the compiled kernel.

Loops over depth-sorted Gaussians and vectorizes over the pixels of each
Gaussian's bounding box.  Much slower than the extension on large scenes, but
has no build step.
"""

from __future__ import annotations

import numpy as np

MIN_ALPHA = 1.0 / 255.0
MAX_ALPHA = 0.99
T_EPS = 1e-4


def _pixels(box, W):
    x0, x1, y0, y1 = (int(v) for v in box)
    if x0 > x1 or y0 > y1:
        return None
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    return (ys * W + xs).ravel(), xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def _alpha(i, xs, ys, mean2d, conic, opacity):
    dx = xs - mean2d[i, 0]
    dy = ys - mean2d[i, 1]
    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
    p = np.exp(power)
    a = opacity[i] * p
    clamped = a > MAX_ALPHA
    a = np.where(clamped, MAX_ALPHA, a)
    return a, p, clamped, dx, dy


def forward(mean2d, conic, opacity, color, order, bbox, H, W, bg, tile=16, nthreads=1):
    npx = H * W
    C = np.zeros((npx, 3))
    T = np.ones(npx)
    wsum = np.zeros(npx)
    ncon = np.zeros(npx, dtype=np.int32)
    done = np.zeros(npx, dtype=bool)
    for i in order:
        px = _pixels(bbox[i], W)
        if px is None:
            continue
        flat, xs, ys = px
        live = ~done[flat]
        flat, xs, ys = flat[live], xs[live], ys[live]
        if flat.size == 0:
            continue
        a, _, _, _, _ = _alpha(i, xs, ys, mean2d, conic, opacity)
        keep = a >= MIN_ALPHA
        flat, a = flat[keep], a[keep]
        Tb = T[flat]
        wgt = a * Tb
        C[flat] += wgt[:, None] * color[i][None, :]
        wsum[flat] += wgt
        ncon[flat] += 1
        Tn = Tb * (1.0 - a)
        T[flat] = Tn
        done[flat[Tn < T_EPS]] = True
    image = C + T[:, None] * np.asarray(bg)[None, :]
    return image.reshape(H, W, 3), T.reshape(H, W), wsum.reshape(H, W), ncon.reshape(H, W)


def backward(mean2d, conic, opacity, color, order, bbox, H, W, bg, dimg, tile=16):
    n = mean2d.shape[0]
    npx = H * W
    g_img = dimg.reshape(npx, 3)
    T = np.ones(npx)
    done = np.zeros(npx, dtype=bool)
    records = []
    for i in order:
        px = _pixels(bbox[i], W)
        if px is None:
            continue
        flat, xs, ys = px
        live = ~done[flat]
        flat, xs, ys = flat[live], xs[live], ys[live]
        if flat.size == 0:
            continue
        a, p, clamped, dx, dy = _alpha(i, xs, ys, mean2d, conic, opacity)
        keep = a >= MIN_ALPHA
        flat, a, p, clamped, dx, dy = flat[keep], a[keep], p[keep], clamped[keep], dx[keep], dy[keep]
        Tb = T[flat]
        records.append((i, flat, a, p, clamped, dx, dy, Tb))
        Tn = Tb * (1.0 - a)
        T[flat] = Tn
        done[flat[Tn < T_EPS]] = True

    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_col = np.zeros((n, 3))
    Rb = np.broadcast_to(np.asarray(bg, dtype=np.float64), (npx, 3)).copy()
    for i, flat, a, p, clamped, dx, dy, Tb in reversed(records):
        g = g_img[flat]
        R = Rb[flat]
        g_col[i] += np.sum((a * Tb)[:, None] * g, axis=0)
        ga = Tb * np.sum((color[i][None, :] - R) * g, axis=1)
        Rb[flat] = a[:, None] * color[i][None, :] + (1.0 - a)[:, None] * R
        free = ~clamped
        ga, p, dx, dy = ga[free], p[free], dx[free], dy[free]
        g_op[i] += np.sum(ga * p)
        gpow = ga * opacity[i] * p
        g_conic[i, 0] += np.sum(-0.5 * dx * dx * gpow)
        g_conic[i, 1] += np.sum(-dx * dy * gpow)
        g_conic[i, 2] += np.sum(-0.5 * dy * dy * gpow)
        g_mean[i, 0] += np.sum(gpow * (conic[i, 0] * dx + conic[i, 1] * dy))
        g_mean[i, 1] += np.sum(gpow * (conic[i, 1] * dx + conic[i, 2] * dy))
    return g_mean, g_conic, g_op, g_col
