"""Cross-model grafting: CNN-branch queries/values attend over transformer keys.

The attention weights Y also feed a small head that turns the symmetrised
matrix Y + Yᵀ into the cross attention matrix (CAM) supervised by the
attention-guided loss.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .encoders import attention
from .errors import CapacityError
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, LayerNorm, Linear, Module
from .tensor import Tensor

DEFAULT_ATTENTION_CAP = 4096


@dataclass
class CamOutput:
    z: Tensor  # grafted feature, N×d×H'×W'
    cam: Tensor  # N×1×(H'W')×(H'W'), values in [0, 1]
    y: Tensor  # attention weights, N×heads×(H'W')×(H'W')
    sym: Tensor  # Y + Yᵀ before the CAM head
    attended: Tensor  # Y·v, N×(H'W')×d


class CMGM(Module):
    def __init__(self, rng, c_r, c_s, dim, heads=1, attention_cap=DEFAULT_ATTENTION_CAP):
        self.heads = heads
        self.attention_cap = attention_cap
        self.ln_r = LayerNorm(c_r)
        self.ln_s = LayerNorm(c_s)
        self.w_q = Linear(rng, c_r, dim)
        self.w_k = Linear(rng, c_s, dim)
        self.w_v = Linear(rng, c_r, dim)
        self.w_o = Linear(rng, dim, dim)
        self.out_block = ConvBNReLU(rng, dim, dim, 3)
        self.cam_conv = Conv2d(rng, heads, 1, 1, bias=True)
        self.cam_bn = BatchNorm2d(1)

    def __call__(self, f_r, f_s) -> CamOutput:
        return graft(f_r, f_s, self)


def graft(f_r, f_s, p: CMGM) -> CamOutput:
    n, _, h, w = f_r.shape
    if h * w > p.attention_cap:
        raise CapacityError(f"{h}×{w} = {h * w} positions exceeds the attention cap of {p.attention_cap}")
    f_s = T.bilinear_resize(f_s, h, w)
    r = p.ln_r(T.flatten_spatial(f_r))
    s = p.ln_s(T.flatten_spatial(f_s))
    v = p.w_v(r)
    attended, y = attention(p.w_q(r), p.w_k(s), v, p.heads)
    z = p.w_o(attended) + v
    zmap = T.unflatten_spatial(z, h, w)
    z_out = p.out_block(zmap) + zmap
    sym = y + T.transpose(y)
    cam = T.tanh(T.relu(p.cam_bn(p.cam_conv(sym))))
    return CamOutput(z_out, cam, y, sym, attended)
