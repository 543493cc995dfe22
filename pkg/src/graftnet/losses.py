"""Training objective: BCE + soft IoU on every map and the attention-guided loss on CAM."""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor, resize_array

BCE_EPS = 1e-7
AUX_WEIGHT = 1.0 / 8.0


def attn_matrix(m):
    """Outer product of a flattened map with itself: out[x, y] = m[x] · m[y].

    Accepts H×W, N×H×W or N×1×H×W maps with values in [0, 1] and returns
    N×(HW)×(HW) (or (HW)×(HW) for a single H×W map).
    """
    m = T.as_tensor(m)
    if np.any(m.data < 0) or np.any(m.data > 1):
        raise DomainError("attention matrix source must lie in [0, 1]")
    if m.ndim == 2:
        flat = T.reshape(m, (-1, 1))
        return T.matmul(flat, T.transpose(flat))
    flat = T.reshape(m, (m.shape[0], -1, 1))
    return T.matmul(flat, T.transpose(flat))


def attn_matrix_array(m):
    """Same construction on plain arrays, for targets and weights that carry no gradient."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0) or np.any(m > 1):
        raise DomainError("attention matrix source must lie in [0, 1]")
    flat = m.reshape(m.shape[0], -1) if m.ndim > 2 else m.reshape(1, -1)
    out = flat[:, :, None] * flat[:, None, :]
    return out[0] if m.ndim == 2 else out


def bce_pixel(g, p):
    """g·log p + (1-g)·log(1-p) with p clamped to [eps, 1-eps]; non-positive."""
    p = min(max(p, BCE_EPS), 1.0 - BCE_EPS)
    return g * math.log(p) + (1.0 - g) * math.log(1.0 - p)


def bce_terms(g, p):
    """Elementwise log-likelihood terms (the quantity negated by the losses)."""
    g = T.as_tensor(g)
    p = T.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return g * T.log(p) + (1.0 - g) * T.log(1.0 - p)


def bce_loss(p, g):
    return -T.mean(bce_terms(g, p))


def iou_loss(p, g):
    """1 - (ΣPG + 1) / (Σ(P + G - PG) + 1) per sample, averaged over the batch."""
    g = T.as_tensor(g)
    if p.shape != g.shape:
        raise DimensionError(f"iou_loss: {p.shape} vs {g.shape}")
    axes = tuple(range(1, p.ndim)) if p.ndim > 2 else None
    inter = T.tsum(p * g, axes)
    union = T.tsum(p + g - p * g, axes)
    return T.mean(1.0 - (inter + 1.0) / (union + 1.0))


def omega(g_a, rp_a, sp_a):
    """Branch-error weight in [1, 2]; a constant with respect to the graph."""
    g_a, rp_a, sp_a = (np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in (g_a, rp_a, sp_a))
    return 0.5 * (np.abs(g_a - rp_a) + np.abs(g_a - sp_a)) + 1.0


_frozen = threading.local()


@contextlib.contextmanager
def frozen_omega():
    """Reuse the first ω computed inside the block for every later agl() call.

    ω carries no gradient, so a finite-difference check has to hold it fixed
    while perturbing anything upstream of the auxiliary maps.
    """
    prev = getattr(_frozen, "slot", None)
    _frozen.slot = [None]
    try:
        yield
    finally:
        _frozen.slot = prev


def agl(g_a, cam, rp_a, sp_a, beta=1.0):
    """Attention-guided loss: (1 + β·ω)-weighted BCE between CAM and the target matrix."""
    shapes = {np.shape(x.data if isinstance(x, Tensor) else x) for x in (g_a, cam, rp_a, sp_a)}
    if len(shapes) != 1:
        raise DimensionError(f"agl: matrix shapes differ: {sorted(shapes)}")
    om = omega(g_a, rp_a, sp_a)
    slot = getattr(_frozen, "slot", None)
    if slot is not None:
        if slot[0] is None:
            slot[0] = om
        om = slot[0]
    w = 1.0 + beta * om
    w = T.Tensor(w, dtype=cam.dtype)
    return -T.tsum(w * bce_terms(g_a, cam)) / T.Tensor(w.data.sum(), dtype=cam.dtype)


def downsample_mask(g, h, w):
    """Area-average a binary N×1×H×W mask to h×w, then threshold at 0.5."""
    g = np.asarray(g)
    H, W = g.shape[-2:]
    if (H, W) == (h, w):
        return g.copy()
    if H % h == 0 and W % w == 0:
        lead = g.shape[:-2]
        avg = g.reshape(lead + (h, H // h, w, W // w)).mean(axis=(-3, -1))
    else:
        avg = resize_array(g.astype(np.float64), h, w)
    return (avg >= 0.5).astype(g.dtype)


def combine(l_p, l_ag, l_aux):
    return l_p + l_ag + l_aux * AUX_WEIGHT


def total_loss(p, rp, sp, cam, g, beta=1.0):
    """Composite objective.

    ``p`` is the full-resolution prediction; ``rp``/``sp`` the auxiliary maps
    (either may be None); ``cam`` the N×1×K×K cross attention matrix (None
    disables the attention-guided term). ``g`` is the binary N×1×H×W mask.
    Returns the scalar loss tensor and a dict of float components.
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    dt = p.dtype
    g_full = Tensor(g, dtype=dt)
    bce_p = bce_loss(p, g_full)
    iou_p = iou_loss(p, g_full)
    l_p = bce_p + iou_p

    aux = None
    for m in (rp, sp):
        if m is None:
            continue
        gd = Tensor(downsample_mask(g, *m.shape[-2:]), dtype=dt)
        term = bce_loss(m, gd) + iou_loss(m, gd)
        aux = term if aux is None else aux + term

    l_ag = None
    if cam is not None:
        k = cam.shape[-1]
        if rp is not None and rp.shape[-2] * rp.shape[-1] == k:
            hw = tuple(rp.shape[-2:])
        else:
            hw = _grid_for(k, g.shape[-2:])
        g_a = attn_matrix_array(downsample_mask(g, *hw)[:, 0])
        rp_a = _aux_matrix(rp, hw, g_a)
        sp_a = _aux_matrix(sp, hw, g_a)
        l_ag = agl(Tensor(g_a, dtype=dt), T.reshape(cam, (cam.shape[0], k, k)), rp_a, sp_a, beta)

    zero = Tensor(0.0, dtype=dt)
    total = combine(l_p, l_ag if l_ag is not None else zero, aux if aux is not None else zero)
    parts = {
        "total": total.item(),
        "bce_P": bce_p.item(),
        "iou_P": iou_p.item(),
        "agl": l_ag.item() if l_ag is not None else 0.0,
        "aux": aux.item() if aux is not None else 0.0,
    }
    return total, parts


def _grid_for(k, full_hw):
    """Grid (h, w) with h·w = k and the mask's aspect ratio."""
    H, W = full_hw
    h = int(round(math.sqrt(k * H / W)))
    if h * (k // h) != k:
        raise DimensionError(f"cannot map a {k}-position matrix onto a {H}×{W} mask")
    return h, k // h


def _aux_matrix(m, hw, fallback):
    if m is None:
        return fallback
    arr = np.clip(np.asarray(m.data, dtype=np.float64), 0.0, 1.0)
    if arr.shape[-2:] != tuple(hw):
        arr = np.clip(resize_array(arr, *hw), 0.0, 1.0)
    return attn_matrix_array(arr[:, 0])


def model_loss(outputs, g, beta=1.0, use_agl=True):
    cam = outputs.graft.cam if (outputs.graft is not None and use_agl) else None
    return total_loss(outputs.pred, outputs.rp, outputs.sp, cam, g, beta)
