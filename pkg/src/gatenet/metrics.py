"""Binary segmentation metrics for a grayscale prediction against a binary mask.

Predictions are float arrays in [0, 1]; ground truths are binarized at 0.5.
Threshold sweeps use the 256 thresholds ``k / 255`` with ``pred >= t``
counted as foreground. Ratios with a zero denominator evaluate to 0.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate

EPS = np.spacing(1.0)
THRESHOLDS = np.arange(256) / 255.0
METRIC_NAMES = ("pa", "f_max", "f_mean", "f_weighted", "s_measure", "e_measure", "iou", "dice", "ber", "mae")


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected 2-D maps, got shape {pred.shape}")
    return pred, gt.astype(bool) if gt.dtype == bool else gt >= 0.5


def _div(num, den):
    return num / den if den else 0.0


def confusion(pred_bin: np.ndarray, gt: np.ndarray) -> Confusion:
    pred_bin = np.asarray(pred_bin, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred_bin.shape != gt.shape:
        raise ValueError(f"prediction shape {pred_bin.shape} does not match ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred_bin & gt))
    fp = int(np.count_nonzero(pred_bin & ~gt))
    fn = int(np.count_nonzero(~pred_bin & gt))
    return Confusion(tp, pred_bin.size - tp - fp - fn, fp, fn)


def ratio_metrics(c: Confusion) -> dict[str, float]:
    """Pixel accuracy, precision, recall, IoU, Dice and balanced error rate."""
    tpr = _div(c.tp, c.tp + c.fn)
    tnr = _div(c.tn, c.tn + c.fp)
    return {
        "pa": _div(c.tp + c.tn, c.total),
        "precision": _div(c.tp, c.tp + c.fp),
        "recall": tpr,
        "iou": _div(c.tp, c.tp + c.fp + c.fn),
        "dice": _div(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "ber": 1.0 - 0.5 * (tpr + tnr),
    }


def f_measure(precision: float, recall: float, beta2: float = 0.3) -> float:
    return _div((1 + beta2) * precision * recall, beta2 * precision + recall)


def adaptive_threshold(pred: np.ndarray) -> float:
    return min(2.0 * float(np.mean(pred)), 1.0)


def _threshold_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """TP and FP counts for every threshold ``k / 255``."""
    # levels[p] = number of thresholds t with t <= pred[p]
    levels = np.searchsorted(THRESHOLDS, pred.ravel(), side="right")
    g = gt.ravel()
    fg_hist = np.bincount(levels[g], minlength=257)
    bg_hist = np.bincount(levels[~g], minlength=257)
    # pixel counts as positive at threshold k iff levels > k
    tp = np.cumsum(fg_hist[::-1])[::-1][1:]
    fp = np.cumsum(bg_hist[::-1])[::-1][1:]
    return tp, fp


def _f_from_counts(tp, fp, n_fg, beta2=0.3):
    tp = tp.astype(np.float64)
    pos = tp + fp
    precision = np.divide(tp, pos, out=np.zeros_like(tp), where=pos > 0)
    recall = tp / n_fg if n_fg else np.zeros_like(tp)
    den = beta2 * precision + recall
    return np.divide((1 + beta2) * precision * recall, den, out=np.zeros_like(tp), where=den > 0)


def _f_at(pred, gt, threshold, beta2=0.3) -> float:
    c = confusion(pred >= threshold, gt)
    return f_measure(_div(c.tp, c.tp + c.fp), _div(c.tp, c.tp + c.fn), beta2)


def f_curve(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, float, float]:
    """F-measure (beta^2 = 0.3) at all 256 thresholds, its max, and its adaptive value."""
    pred, gt = _check_pair(pred, gt)
    tp, fp = _threshold_counts(pred, gt)
    curve = _f_from_counts(tp, fp, int(gt.sum()))
    return curve, float(curve.max()), _f_at(pred, gt, adaptive_threshold(pred))


# ---------------------------------------------------------------------------
# weighted F-measure


def nearest_foreground(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact Euclidean nearest foreground pixel for every position.

    Ties go to the smallest column, then the smallest row. Returns
    (squared distance, row index, column index); foreground pixels map to
    themselves. ``gt`` must contain at least one foreground pixel.
    """
    gt = np.asarray(gt, dtype=bool)
    h, w = gt.shape
    if not gt.any():
        raise ValueError("nearest_foreground needs a non-empty mask")
    rows = np.arange(h)[:, None]
    big = 4 * (h + w) ** 2
    # per column: nearest foreground row, preferring the upper one on ties
    above = np.maximum.accumulate(np.where(gt, rows, -big), axis=0)
    below = np.minimum.accumulate(np.where(gt, rows, big)[::-1], axis=0)[::-1]
    up_d, down_d = rows - above, below - rows
    col_row = np.where(up_d <= down_d, above, below)
    col_d2 = np.minimum(up_d, down_d).astype(np.int64) ** 2
    col_d2[np.minimum(up_d, down_d) >= big // 2] = big * big
    cols = np.arange(w)
    shift2 = (cols[:, None] - cols[None, :]) ** 2
    d2 = np.empty((h, w), dtype=np.int64)
    near_r = np.empty((h, w), dtype=np.int64)
    near_c = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        cand = shift2 + col_d2[r][None, :]
        best = np.argmin(cand, axis=1)  # first minimum -> smallest column
        d2[r] = cand[cols, best]
        near_c[r] = best
        near_r[r] = col_row[r, best]
    return d2, near_r, near_c


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = (size - 1) / 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(float).eps * k.max()] = 0
    return k / k.sum()


def weighted_f(pred: np.ndarray, gt: np.ndarray, beta2: float = 1.0) -> float:
    """Weighted F-measure with Gaussian error dependency (7x7, sigma 5) and distance-decayed importance."""
    pred, gt = _check_pair(pred, gt)
    if not gt.any():
        return 0.0
    err = np.abs(pred - gt)
    d2, nr, nc = nearest_foreground(gt)
    err_t = np.where(gt, err, err[nr, nc])
    err_a = correlate(err_t, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(gt & (err_a < err), err_a, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * np.sqrt(d2)))
    ew = min_e * importance
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (EPS + tpw + fpw)
    return float((1 + beta2) * recall * precision / (EPS + recall + beta2 * precision))


# ---------------------------------------------------------------------------
# S-measure


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    dx, dy = pred - x, gt - y
    sx = (dx * dx).sum() / (n - 1 + EPS)
    sy = (dy * dy).sum() / (n - 1 + EPS)
    sxy = (dx * dy).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based (x, y) foreground centroid, rounded half up."""
    ys, xs = np.nonzero(gt)
    return _round_half_up(xs.mean() + 1), _round_half_up(ys.mean() + 1)


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term."""
    pred, gt = _check_pair(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    g = gt.astype(np.float64)
    s_obj = y * _object_score(pred[gt]) + (1 - y) * _object_score(1.0 - pred[~gt])
    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    quads = [
        (slice(0, cy), slice(0, cx), cx * cy),
        (slice(0, cy), slice(cx, w), (w - cx) * cy),
        (slice(cy, h), slice(0, cx), cx * (h - cy)),
        (slice(cy, h), slice(cx, w), (w - cx) * (h - cy)),
    ]
    s_reg = sum(n / area * _ssim(pred[rs, cs], g[rs, cs]) for rs, cs, n in quads if n)
    return float(max(0.0, alpha * s_obj + (1 - alpha) * s_reg))


# ---------------------------------------------------------------------------
# E-measure


def _e_from_counts(tp, fp, n_fg, n):
    """Enhanced alignment score per threshold from binarized-prediction counts."""
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    pred_fg = tp + fp
    pred_bg = n - pred_fg
    if n_fg == 0:
        return pred_bg / n
    if n_fg == n:
        return pred_fg / n
    fn = n_fg - tp
    tn = pred_bg - fn
    mp = pred_fg / n
    mg = n_fg / n
    total = np.zeros_like(tp)
    for count, a, b in (
        (tp, 1 - mp, 1 - mg),
        (fp, 1 - mp, -mg),
        (fn, -mp, 1 - mg),
        (tn, -mp, -mg),
    ):
        align = 2 * a * b / (a * a + b * b + EPS)
        total += (align + 1) ** 2 / 4 * count
    return total / n


def e_measure(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Enhanced alignment at the adaptive threshold, plus the 256-threshold curve."""
    pred, gt = _check_pair(pred, gt)
    n_fg, n = int(gt.sum()), gt.size
    tp, fp = _threshold_counts(pred, gt)
    curve = _e_from_counts(tp, fp, n_fg, n)
    c = confusion(pred >= adaptive_threshold(pred), gt)
    adaptive = float(_e_from_counts(c.tp, c.fp, n_fg, n))
    return adaptive, curve


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return float(np.abs(pred - gt).mean())


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    pa: float
    f_max: float
    f_mean: float
    f_weighted: float
    s_measure: float
    e_measure: float
    iou: float
    dice: float
    ber: float
    mae: float
    f_curve: np.ndarray = field(repr=False)
    e_curve: np.ndarray = field(repr=False)
    threshold_used: float = 0.5

    def metrics(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in METRIC_NAMES}


def binarization_threshold(pred: np.ndarray, binarize: str | float = 0.5) -> float:
    if binarize == "adaptive":
        return adaptive_threshold(pred)
    return float(binarize)


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, binarize: str | float = 0.5) -> MetricReport:
    """All ten metrics for one image.

    ``binarize`` picks the threshold behind PA/IoU/Dice/BER: a number, or
    ``"adaptive"`` for min(2 * mean(pred), 1).
    """
    pred, gt = _check_pair(pred, gt)
    if pred.min() < 0 or pred.max() > 1:
        raise ValueError("prediction values must lie in [0, 1]")
    thr = binarization_threshold(pred, binarize)
    ratios = ratio_metrics(confusion(pred >= thr, gt))
    fc, f_max, f_mean = f_curve(pred, gt)
    e_adp, ec = e_measure(pred, gt)
    return MetricReport(
        pa=ratios["pa"],
        f_max=f_max,
        f_mean=f_mean,
        f_weighted=weighted_f(pred, gt),
        s_measure=s_measure(pred, gt),
        e_measure=e_adp,
        iou=ratios["iou"],
        dice=ratios["dice"],
        ber=ratios["ber"],
        mae=mae(pred, gt.astype(np.float64)),
        f_curve=fc,
        e_curve=ec,
        threshold_used=thr,
    )


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Dataset summary: per-image means, except F_max = max of the mean F curve."""
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    f_curve_mean = np.mean(np.stack([r.f_curve for r in reports]), axis=0)
    e_curve_mean = np.mean(np.stack([r.e_curve for r in reports]), axis=0)
    mean["f_max"] = float(f_curve_mean.max())
    thr = float(np.mean([r.threshold_used for r in reports]))
    return MetricReport(**mean, f_curve=f_curve_mean, e_curve=e_curve_mean, threshold_used=thr)


def _evaluate_args(args):
    return evaluate_pair(*args)


def evaluate_dataset(pairs: Sequence[tuple[np.ndarray, np.ndarray]], names: Sequence[str] | None = None,
                     binarize: str | float = 0.5, jobs: int = 1) -> tuple[MetricReport, list[MetricReport]]:
    """Evaluate every pair and aggregate in sorted-name order.

    Returns (aggregate, per-image reports), the latter in sorted-name order
    too. ``jobs > 1`` fans images out to worker processes; results do not
    depend on it.
    """
    if not pairs:
        raise ValueError("evaluate_dataset needs at least one pair")
    if names is None:
        names = [f"{i:08d}" for i in range(len(pairs))]
    if len(names) != len(pairs):
        raise ValueError("names and pairs differ in length")
    order = sorted(range(len(pairs)), key=lambda i: names[i])
    work = [(pairs[i][0], pairs[i][1], binarize) for i in order]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_image = list(pool.map(_evaluate_args, work))
    else:
        per_image = [_evaluate_args(w) for w in work]
    return aggregate(per_image), per_image
