"""Toy-scale CNN and attention backbones producing the two feature pyramids.

CNN branch: stride-2 stem (R1, not exposed) then four stages of two residual
blocks each; stage i emits R_i at input/2^i with C·2^(i-1) channels.

Attention branch: patch embedding, one pre-norm transformer block per stage,
2× patch merging after stages 1 and 2; stage 4 keeps stage 3's grid. Stage i
has C·2^i channels for i <= 3 and stage 4 repeats stage 3's width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import tensor as T
from .errors import DimensionError
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, LayerNorm, Linear, Module


def scale_channels(c, factor):
    return max(4, math.ceil(c * factor))


@dataclass
class PyramidSpec:
    input_hw: int
    base_channels: int
    stage_count: int = 4
    branch: str = "cnn"
    patch_size: int = 4

    def __post_init__(self):
        if self.branch not in ("cnn", "attn"):
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.input_hw % self.divisor:
            raise DimensionError(f"{self.branch} input {self.input_hw} is not divisible by {self.divisor}")

    @property
    def divisor(self):
        if self.branch == "cnn":
            return 2 ** (self.stage_count + 1)
        return self.patch_size * 2 ** (min(self.stage_count, 3) - 1)

    def stage_ids(self):
        if self.branch == "cnn":
            return list(range(2, self.stage_count + 2))
        return list(range(1, self.stage_count + 1))

    def channels(self, i):
        c = self.base_channels
        if self.branch == "cnn":
            return c * 2 ** (i - 1)
        return c * 2 ** min(i, 3)

    def spatial(self, i):
        if self.branch == "cnn":
            return self.input_hw // 2**i
        grid = self.input_hw // self.patch_size
        return grid // 2 ** (min(i, 3) - 1)

    def shapes(self):
        """Stage index -> (channels, height, width), computed from the size formulas alone."""
        return {i: (self.channels(i), self.spatial(i), self.spatial(i)) for i in self.stage_ids()}


@dataclass
class FeaturePyramid:
    branch: str
    features: dict = field(default_factory=dict)

    def __getitem__(self, i):
        return self.features[i]

    def stages(self):
        return sorted(self.features)

    def shapes(self):
        return {i: tuple(f.shape[1:]) for i, f in self.features.items()}


class BasicBlock(Module):
    def __init__(self, rng, c_in, c_out, stride):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride=stride)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.down_conv = Conv2d(rng, c_in, c_out, 1, stride=stride)
            self.down_bn = BatchNorm2d(c_out)
        else:
            self.down_conv = None

    def __call__(self, x):
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        short = self.down_bn(self.down_conv(x)) if self.down_conv is not None else x
        return T.relu(y + short)


class CNNEncoder(Module):
    def __init__(self, rng, spec: PyramidSpec):
        if spec.branch != "cnn":
            raise ValueError("CNNEncoder needs a cnn PyramidSpec")
        self._spec = spec
        c = spec.base_channels
        self.stem = ConvBNReLU(rng, 3, c, 3, stride=2)
        self.stages = []
        c_prev = c
        for i in spec.stage_ids():
            c_out = spec.channels(i)
            self.stages.append(_Stage([BasicBlock(rng, c_prev, c_out, 2), BasicBlock(rng, c_out, c_out, 1)]))
            c_prev = c_out

    @property
    def spec(self):
        return self._spec

    def __call__(self, image):
        _check_image(image, self._spec)
        x = self.stem(image)
        feats = {}
        for i, stage in zip(self._spec.stage_ids(), self.stages):
            x = stage(x)
            feats[i] = x
        return FeaturePyramid("cnn", feats)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def attention(q, k, v, heads=1):
    """Scaled dot-product attention on N×T×D tensors.

    Returns the attended values (N×Tq×D) and the attention weights
    (N×heads×Tq×Tk).
    """
    n, tq, d = q.shape
    tk = k.shape[1]
    if d % heads:
        raise DimensionError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    qh = T.permute(T.reshape(q, (n, tq, heads, dh)), (0, 2, 1, 3))
    kh = T.permute(T.reshape(k, (n, tk, heads, dh)), (0, 2, 3, 1))
    vh = T.permute(T.reshape(v, (n, tk, heads, dh)), (0, 2, 1, 3))
    y = T.softmax_rows(T.matmul(qh, kh) * (1.0 / math.sqrt(dh)))
    z = T.matmul(y, vh)
    z = T.reshape(T.permute(z, (0, 2, 1, 3)), (n, tq, d))
    return z, y


class TransformerBlock(Module):
    def __init__(self, rng, dim, heads=1, mlp_ratio=2):
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def __call__(self, x):
        h = self.ln1(x)
        z, _ = attention(self.q(h), self.k(h), self.v(h), self.heads)
        x = x + self.proj(z)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


class AttnEncoder(Module):
    def __init__(self, rng, spec: PyramidSpec, heads=1):
        if spec.branch != "attn":
            raise ValueError("AttnEncoder needs an attn PyramidSpec")
        self._spec = spec
        ids = spec.stage_ids()
        d1 = spec.channels(1)
        self.embed = Conv2d(rng, 3, d1, spec.patch_size, stride=spec.patch_size, pad=0, bias=True)
        self.embed_ln = LayerNorm(d1)
        self.blocks = []
        self.merges = []
        for i in ids:
            d = spec.channels(i)
            self.blocks.append(TransformerBlock(rng, d, heads))
            if i + 1 in ids and i < 3:
                self.merges.append(_PatchMerge(rng, d, spec.channels(i + 1)))

    @property
    def spec(self):
        return self._spec

    def __call__(self, image):
        _check_image(image, self._spec)
        x = self.embed(image)
        g = x.shape[-1]
        tokens = self.embed_ln(T.flatten_spatial(x))
        feats = {}
        for i, block in zip(self._spec.stage_ids(), self.blocks):
            tokens = block(tokens)
            fmap = T.unflatten_spatial(tokens, g, g)
            feats[i] = fmap
            if i < 3 and i - 1 < len(self.merges):
                tokens = self.merges[i - 1](fmap)
                g //= 2
        return FeaturePyramid("attn", feats)


class _PatchMerge(Module):
    """2×2 neighbourhood concat + linear, written as a stride-2 2×2 convolution."""

    def __init__(self, rng, d_in, d_out):
        self.reduce = Conv2d(rng, d_in, d_out, 2, stride=2, pad=0, bias=True)
        self.ln = LayerNorm(d_out)

    def __call__(self, fmap):
        return self.ln(T.flatten_spatial(self.reduce(fmap)))


def _check_image(image, spec):
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected N×3×H×W image, got {image.shape}")
    h, w = image.shape[-2:]
    if h != w:
        raise DimensionError(f"{spec.branch} encoder needs a square input, got {h}×{w}")
    if h % spec.divisor:
        raise DimensionError(f"{spec.branch} input {h} is not divisible by {spec.divisor}")


def cnn_forward(image, encoder: CNNEncoder):
    return encoder(image)


def attn_forward(image, encoder: AttnEncoder):
    return encoder(image)
