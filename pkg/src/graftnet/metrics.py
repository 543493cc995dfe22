"""Saliency evaluation: MAE, max F-measure, S-measure, E-measure and BDE.

All functions take a prediction P in [0, 1] and a binary ground truth G of
the same H×W shape and compute in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import resize_array

F_BETA2 = 0.3
N_THRESHOLDS = 255
S_ALPHA = 0.5
EPS = np.finfo(np.float64).eps


def _prep(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g) > 0.5
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def mae(p, g):
    p, g = _prep(p, g)
    return float(np.abs(p - g).mean())


def f_measure_curve(p, g, beta2=F_BETA2):
    """F-measure at thresholds t/255, t = 1..255 (P >= t/255 is salient).

    Returns ``(curve, f_max, degenerate)``; ``degenerate`` is True for an empty
    ground truth, in which case the curve is all zeros.
    """
    p, g = _prep(p, g)
    thr = np.arange(1, N_THRESHOLDS + 1) / 255.0
    n_gt = int(g.sum())
    if n_gt == 0:
        return np.zeros(N_THRESHOLDS), 0.0, True
    all_sorted = np.sort(p.ravel())
    fg_sorted = np.sort(p[g])
    n_pred = all_sorted.size - np.searchsorted(all_sorted, thr, side="left")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, thr, side="left")
    precision = np.divide(tp, n_pred, out=np.zeros(N_THRESHOLDS), where=n_pred > 0)
    recall = tp / n_gt
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    curve = np.divide(num, den, out=np.zeros(N_THRESHOLDS), where=den > 0)
    return curve, float(curve.max()), False


# ---------------------------------------------------------------- S-measure


def _s_object(x, mask):
    vals = x[mask]
    if vals.size == 0:
        return 0.0
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _object_score(p, g):
    fg = np.where(g, p, 0.0)
    bg = np.where(~g, 1.0 - p, 0.0)
    u = g.mean()
    return u * _s_object(fg, g) + (1 - u) * _s_object(bg, ~g)


def _centroid(g):
    h, w = g.shape
    if not g.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(g)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def _ssim(p, g):
    n = p.size
    x, y = p.mean(), g.mean()
    denom = max(n - 1, 1)
    sx = ((p - x) ** 2).sum() / denom
    sy = ((g - y) ** 2).sum() / denom
    sxy = ((p - x) * (g - y)).sum() / denom
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _region_score(p, g):
    h, w = g.shape
    x, y = _centroid(g)
    area = h * w
    gf = g.astype(np.float64)
    parts = [
        (slice(0, y), slice(0, x), x * y / area),
        (slice(0, y), slice(x, w), (w - x) * y / area),
        (slice(y, h), slice(0, x), x * (h - y) / area),
        (slice(y, h), slice(x, w), (w - x) * (h - y) / area),
    ]
    score = 0.0
    for rs, cs, wt in parts:
        pb, gb = p[rs, cs], gf[rs, cs]
        if pb.size:
            score += wt * _ssim(pb, gb)
    return score


def s_measure(p, g, alpha=S_ALPHA):
    """Structure measure: α·object + (1-α)·region, with the usual all-fg/all-bg shortcuts."""
    p, g = _prep(p, g)
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    return float(max(0.0, alpha * _object_score(p, g) + (1 - alpha) * _region_score(p, g)))


# ---------------------------------------------------------------- E-measure


def adaptive_binarize(p):
    """P >= min(2·mean(P), 1); an all-zero map stays empty."""
    thr = min(2.0 * p.mean(), 1.0)
    return (p >= thr) & (p > 0)


def e_measure(p, g):
    """Enhanced-alignment measure of the adaptively binarized prediction."""
    p, g = _prep(p, g)
    fm = adaptive_binarize(p).astype(np.float64)
    gt = g.astype(np.float64)
    if not g.any():
        enhanced = 1.0 - fm
    elif g.all():
        enhanced = fm
    else:
        a_p = fm - fm.mean()
        a_g = gt - gt.mean()
        align = 2.0 * a_g * a_p / (a_g * a_g + a_p * a_p + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


# ---------------------------------------------------------------- BDE


def boundary_map(mask):
    """Foreground pixels with a 4-neighbour in the background (outside the frame counts as background)."""
    m = np.asarray(mask, dtype=bool)
    pad = np.pad(m, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~interior


def bde(p, g, threshold=0.5):
    """Symmetric mean boundary displacement in pixels.

    Returns ``(value, flagged)``. When exactly one boundary is empty the value
    is the image diagonal and ``flagged`` is True.
    """
    p, g = _prep(p, g)
    bp = boundary_map(p >= threshold)
    bg = boundary_map(g)
    if not bp.any() and not bg.any():
        return 0.0, False
    if not bp.any() or not bg.any():
        return math.hypot(*g.shape), True
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    return float(0.5 * (d_to_g[bp].mean() + d_to_p[bg].mean())), False


# ---------------------------------------------------------------- aggregate


@dataclass
class EvalResult:
    mae: float
    f_max: float
    f_curve: np.ndarray = field(repr=False)
    s_measure: float
    e_measure: float
    bde: float
    flags: tuple = ()


def evaluate(p, g) -> EvalResult:
    """All metrics for one map; P is bilinearly resized to G's shape first."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g)
    if p.shape != g.shape:
        p = np.clip(resize_array(p, *g.shape), 0.0, 1.0)
    curve, fmax, f_flag = f_measure_curve(p, g)
    b, b_flag = bde(p, g)
    flags = tuple(n for n, f in (("empty_gt", f_flag), ("bde_empty_boundary", b_flag)) if f)
    return EvalResult(mae(p, g), fmax, curve, s_measure(p, g), e_measure(p, g), b, flags)


def aggregate(results):
    """Dataset means; F-max is the max over thresholds of the mean curve."""
    if not results:
        return EvalResult(float("nan"), float("nan"), np.zeros(N_THRESHOLDS), float("nan"), float("nan"), float("nan"))
    curve = np.mean([r.f_curve for r in results], axis=0)
    return EvalResult(
        float(np.mean([r.mae for r in results])),
        float(curve.max()),
        curve,
        float(np.mean([r.s_measure for r in results])),
        float(np.mean([r.e_measure for r in results])),
        float(np.mean([r.bde for r in results])),
    )
