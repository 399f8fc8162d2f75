"""Slow, direct-formula oracles used to cross-check the fast implementations.

Nothing here imports from :mod:`gatenet.metrics` or reuses its helpers:
each quantity is recomputed from its definition with explicit loops or
per-threshold binarization, so agreement between the two is meaningful.
"""

from __future__ import annotations

import math

import numpy as np

EPS = 2.220446049250313e-16


def _safe(num: float, den: float) -> float:
    return num / den if den != 0 else 0.0


def counts_naive(pred_bin: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    """(tp, tn, fp, fn) by visiting every pixel."""
    tp = tn = fp = fn = 0
    for p, g in zip(np.asarray(pred_bin, bool).ravel().tolist(), np.asarray(gt, bool).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def ratios_naive(pred_bin, gt) -> dict[str, float]:
    tp, tn, fp, fn = counts_naive(pred_bin, gt)
    tpr = _safe(tp, tp + fn)
    tnr = _safe(tn, tn + fp)
    return {
        "pa": (tp + tn) / (tp + tn + fp + fn),
        "iou": _safe(tp, tp + fp + fn),
        "dice": _safe(2 * tp, 2 * tp + fp + fn),
        "ber": 1.0 - (tpr + tnr) / 2.0,
    }


def f_at_naive(pred: np.ndarray, gt: np.ndarray, t: float, beta2: float = 0.3) -> float:
    tp, _, fp, fn = counts_naive(pred >= t, gt)
    p = _safe(tp, tp + fp)
    r = _safe(tp, tp + fn)
    return _safe((1 + beta2) * p * r, beta2 * p + r)


def f_curve_naive(pred, gt) -> np.ndarray:
    return np.array([f_at_naive(pred, gt, k / 255.0) for k in range(256)])


def e_at_naive(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    """Enhanced alignment of a binary map, computed pixel by pixel."""
    fm = np.asarray(pred_bin, dtype=np.float64)
    gtf = np.asarray(gt, dtype=np.float64)
    n = fm.size
    if gtf.sum() == 0:
        enhanced = 1.0 - fm
    elif gtf.sum() == n:
        enhanced = fm
    else:
        bias_f = fm - fm.mean()
        bias_g = gtf - gtf.mean()
        align = 2.0 * bias_g * bias_f / (bias_g * bias_g + bias_f * bias_f + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(sum(enhanced.ravel().tolist()) / n)


def e_curve_naive(pred, gt) -> np.ndarray:
    return np.array([e_at_naive(pred >= k / 255.0, gt) for k in range(256)])


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def _std1(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    m = _mean(values)
    return math.sqrt(sum((v - m) ** 2 for v in values) / (len(values) - 1))


def _object(values: list[float]) -> float:
    if not values:
        return 0.0
    m = _mean(values)
    return 2.0 * m / (m * m + 1.0 + _std1(values) + EPS)


def _region_ssim(p: list[float], g: list[float]) -> float:
    n = len(p)
    if n == 0:
        return 0.0
    x, y = _mean(p), _mean(g)
    sx = sum((a - x) ** 2 for a in p) / (n - 1 + EPS)
    sy = sum((b - y) ** 2 for b in g) / (n - 1 + EPS)
    sxy = sum((a - x) * (b - y) for a, b in zip(p, g)) / (n - 1 + EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure_naive(pred, gt, alpha: float = 0.5) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    h, w = gt.shape
    fg = [(r, c) for r in range(h) for c in range(w) if gt[r, c]]
    frac = len(fg) / (h * w)
    if frac == 0:
        return 1.0 - _mean(pred.ravel().tolist())
    if frac == 1:
        return _mean(pred.ravel().tolist())
    inside = [float(pred[r, c]) for r in range(h) for c in range(w) if gt[r, c]]
    outside = [1.0 - float(pred[r, c]) for r in range(h) for c in range(w) if not gt[r, c]]
    s_obj = frac * _object(inside) + (1 - frac) * _object(outside)
    # 1-based centroid, halves rounded up
    cx = math.floor(_mean([c + 1 for _, c in fg]) + 0.5)
    cy = math.floor(_mean([r + 1 for r, _ in fg]) + 0.5)
    s_reg = 0.0
    for r0, r1, c0, c1 in ((0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)):
        cells = [(r, c) for r in range(r0, r1) for c in range(c0, c1)]
        if not cells:
            continue
        p = [float(pred[r, c]) for r, c in cells]
        g = [float(gt[r, c]) for r, c in cells]
        s_reg += len(cells) / (h * w) * _region_ssim(p, g)
    return max(0.0, alpha * s_obj + (1 - alpha) * s_reg)


def nearest_foreground_naive(gt) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force nearest foreground index; foreground scanned column by column,
    so the first minimum found has the smallest column, then the smallest row."""
    gt = np.asarray(gt, dtype=bool)
    h, w = gt.shape
    fg = [(r, c) for c in range(w) for r in range(h) if gt[r, c]]
    d2 = np.zeros((h, w))
    idx = np.zeros((h, w, 2), dtype=int)
    for r in range(h):
        for c in range(w):
            best = None
            for fr, fc in fg:
                d = (fr - r) ** 2 + (fc - c) ** 2
                if best is None or d < best[0]:
                    best = (d, fr, fc)
            d2[r, c] = best[0]
            idx[r, c] = best[1:]
    return d2, idx


def _gauss(size=7, sigma=5.0) -> list[list[float]]:
    half = (size - 1) // 2
    k = [[math.exp(-(x * x + y * y) / (2 * sigma * sigma)) for x in range(-half, half + 1)]
         for y in range(-half, half + 1)]
    total = sum(sum(row) for row in k)
    return [[v / total for v in row] for row in k]


def weighted_f_naive(pred, gt, beta2: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    h, w = gt.shape
    if not gt.any():
        return 0.0
    err = np.abs(pred - gt)
    d2, idx = nearest_foreground_naive(gt)
    et = np.array([[err[r, c] if gt[r, c] else err[idx[r, c, 0], idx[r, c, 1]] for c in range(w)]
                   for r in range(h)])
    k = _gauss()
    half = len(k) // 2
    ea = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for dy in range(-half, half + 1):
                for dx in range(-half, half + 1):
                    rr, cc = r + dy, c + dx
                    if 0 <= rr < h and 0 <= cc < w:
                        acc += k[dy + half][dx + half] * et[rr, cc]
            ea[r, c] = acc
    tpw = fpw = ew_fg = 0.0
    n_fg = 0
    for r in range(h):
        for c in range(w):
            if gt[r, c]:
                e = min(ea[r, c], err[r, c])
                ew_fg += e
                n_fg += 1
            else:
                fpw += err[r, c] * (2.0 - math.exp(math.log(0.5) / 5.0 * math.sqrt(d2[r, c])))
    tpw = n_fg - ew_fg
    recall = 1.0 - ew_fg / n_fg
    precision = tpw / (EPS + tpw + fpw)
    return (1 + beta2) * recall * precision / (EPS + recall + beta2 * precision)


def evaluate_naive(pred, gt, threshold: float | None = 0.5) -> dict[str, float]:
    """All ten metrics from the slow oracles. ``threshold=None`` means adaptive."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) >= 0.5
    adaptive = min(2.0 * _mean(pred.ravel().tolist()), 1.0)
    thr = adaptive if threshold is None else threshold
    out = ratios_naive(pred >= thr, gt)
    curve = f_curve_naive(pred, gt)
    out["f_max"] = float(curve.max())
    out["f_mean"] = f_at_naive(pred, gt, adaptive)
    out["f_weighted"] = weighted_f_naive(pred, gt)
    out["s_measure"] = s_measure_naive(pred, gt)
    out["e_measure"] = e_at_naive(pred >= adaptive, gt)
    out["mae"] = _mean([abs(p - g) for p, g in zip(pred.ravel().tolist(), gt.ravel().astype(float).tolist())])
    return out


# ---------------------------------------------------------------------------
# convolution oracles


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1,
                 dilation: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation by explicit summation over taps and input channels."""
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(oh):
        for j in range(ow):
            for u in range(kh):
                for v in range(kw):
                    r = i * stride + u * dilation - padding
                    s = j * stride + v * dilation - padding
                    if 0 <= r < h and 0 <= s < wd:
                        out[:, :, i, j] += x[:, :, r, s] @ w[:, :, u, v].T
    if b is not None:
        out += b[None, :, None, None]
    return out


def folded_conv_gather(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, rate: int) -> np.ndarray:
    """Folded atrous conv evaluated by gathering source pixels directly.

    Output pixel (y, x) with window position p = (y % 2, x % 2) in block
    (Y, X) = (y // 2, x // 2) reads, for every tap (u, v) and window
    position q, the input pixel (2 (Y + (u - 1) r) + q_y, 2 (X + (v - 1) r) + q_x),
    weighted by ``w[4 o + p, 4 c + q, u, v]``. Odd sizes are padded with
    zeros at the bottom/right, then cropped.
    """
    n, c, h, wd = x.shape
    oc4 = w.shape[0]
    out = np.zeros((n, oc4 // 4, h, wd))
    for y in range(h):
        for xx in range(wd):
            py, px = y % 2, xx % 2
            by, bx = y // 2, xx // 2
            p = 2 * py + px
            for u in range(3):
                for v in range(3):
                    for qy in range(2):
                        for qx in range(2):
                            sy = 2 * (by + (u - 1) * rate) + qy
                            sx = 2 * (bx + (v - 1) * rate) + qx
                            if not (0 <= sy < h and 0 <= sx < wd):
                                continue
                            q = 2 * qy + qx
                            wsel = w[p::4, q::4, u, v]  # (oc, c): rows 4o+p, cols 4ci+q
                            out[:, :, y, xx] += x[:, :, sy, sx] @ wsel.T
            if b is not None:
                out[:, :, y, xx] += b[p::4][None, :]
    return out
