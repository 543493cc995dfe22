"""Full network and its ablation variants.

``baseline_cnn``   CNN encoder + U-shaped CNN decoder.
``baseline_attn``  attention encoder + U-shaped decoder down to S1.
``cmgm``           both branches grafted at ``graft_pair``; no attention-guided loss.
``cmgm_agl``       as ``cmgm`` with the attention-guided loss switched on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .cmgm import CMGM, CamOutput
from .config import TrainConfig
from .decoder import AttnDecoder, CNNDecoder, DecoderBlock, decode_grafted
from .encoders import AttnEncoder, CNNEncoder, PyramidSpec, scale_channels
from .nn import Module, PredictionHead
from .tensor import Tensor


@dataclass
class Outputs:
    pred: Tensor  # N×1×H×W final map
    rp: Optional[Tensor] = None  # CNN-branch auxiliary map at R5 resolution
    sp: Optional[Tensor] = None  # transformer-branch auxiliary map at the grafted stage
    graft: Optional[CamOutput] = None


def pyramid_specs(cfg: TrainConfig):
    cnn = PyramidSpec(cfg.input_hw, scale_channels(cfg.base_channels, cfg.channel_factor), 4, "cnn")
    attn = PyramidSpec(cfg.attn_input_hw, scale_channels(cfg.base_channels, cfg.channel_factor), 4, "attn", cfg.patch_size)
    return cnn, attn


class GraftNet(Module):
    def __init__(self, cfg: TrainConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self._cfg = cfg
        self.variant = cfg.variant
        cnn_spec, attn_spec = pyramid_specs(cfg)
        self._cnn_spec, self._attn_spec = cnn_spec, attn_spec
        d = cfg.decoder_channels
        uses_cnn = cfg.variant != "baseline_attn"
        uses_attn = cfg.variant != "baseline_cnn"
        r_ch = {i: cnn_spec.channels(i) for i in cnn_spec.stage_ids()}
        s_ch = {i: attn_spec.channels(i) for i in attn_spec.stage_ids()}

        self.cnn_encoder = CNNEncoder(rng, cnn_spec) if uses_cnn else None
        self.attn_encoder = AttnEncoder(rng, attn_spec, cfg.attn_heads) if uses_attn else None
        if cfg.variant == "baseline_attn":
            self.attn_decoder = AttnDecoder(rng, s_ch, d, stop=1)
            self.head = PredictionHead(rng, d)
            return
        if uses_attn:
            self.attn_decoder = AttnDecoder(rng, s_ch, d, stop=cfg.graft_stage)
            self.sp_head = PredictionHead(rng, d)
            self.cmgm = CMGM(rng, r_ch[5], d, d, cfg.cmgm_heads, cfg.attention_cap)
            self.graft_block = DecoderBlock(rng, [d, r_ch[5]], d)
        else:
            self.graft_block = DecoderBlock(rng, [r_ch[5]], d)
        self.rp_head = PredictionHead(rng, r_ch[5])
        self.cnn_decoder = CNNDecoder(rng, r_ch, d)

    @property
    def config(self):
        return self._cfg

    def backbone_attn_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("attn_encoder.")]

    def __call__(self, image) -> Outputs:
        return self.forward(image)

    def forward(self, image) -> Outputs:
        cfg = self._cfg
        image = T.as_tensor(image)
        out_hw = image.shape[-2:]
        if self.attn_encoder is not None:
            small = T.bilinear_resize(image, cfg.attn_input_hw, cfg.attn_input_hw)
            pyr_s = self.attn_encoder(small)
            s_dec = self.attn_decoder(pyr_s)
        if self.variant == "baseline_attn":
            return Outputs(T.bilinear_resize(self.head(s_dec), *out_hw))

        pyr_r = self.cnn_encoder(image)
        r5 = pyr_r[5]
        rp = self.rp_head(r5)
        if self.variant == "baseline_cnn":
            g = self.graft_block(r5)
            return Outputs(self.cnn_decoder(g, pyr_r, out_hw), rp=rp)

        sp = self.sp_head(s_dec)
        graft = self.cmgm(r5, s_dec)
        g = decode_grafted(graft.z, r5, self.graft_block)
        return Outputs(self.cnn_decoder(g, pyr_r, out_hw), rp=rp, sp=sp, graft=graft)


def build_model(cfg: TrainConfig, dtype=None) -> GraftNet:
    if dtype is None:
        return GraftNet(cfg)
    with T.default_dtype(dtype):
        return GraftNet(cfg)
