"""Staggered decoding: transformer FPN, grafted stage, then CNN FPN."""

from __future__ import annotations

from . import tensor as T
from .errors import DimensionError
from .nn import ConvBNReLU, Module, PredictionHead


class DecoderBlock(Module):
    """Fuses n feature maps: per-input 3×3 adapter, resize to the largest map, sum, 3×3 block."""

    def __init__(self, rng, in_channels, c_out):
        self.arity = len(in_channels)
        self.adapters = [ConvBNReLU(rng, c, c_out, 3) for c in in_channels]
        self.fuse = ConvBNReLU(rng, c_out, c_out, 3)

    def __call__(self, *xs):
        if len(xs) != self.arity:
            raise DimensionError(f"decoder block expects {self.arity} inputs, got {len(xs)}")
        th, tw = max((x.shape[-2:] for x in xs), key=lambda s: s[0] * s[1])
        acc = None
        for x, adapter in zip(xs, self.adapters):
            a = T.bilinear_resize(adapter(x), th, tw)
            acc = a if acc is None else acc + a
        return self.fuse(acc)


class AttnDecoder(Module):
    """Top-down over the transformer pyramid, stopping at stage ``stop``."""

    def __init__(self, rng, channels, c_out, stop=2, top=4):
        self.stop = stop
        self.top = top
        self.top_block = DecoderBlock(rng, [channels[top]], c_out)
        self.blocks = [DecoderBlock(rng, [c_out, channels[i]], c_out) for i in range(top - 1, stop - 1, -1)]

    def __call__(self, pyramid):
        return decode_attn(pyramid, self)


def decode_attn(pyramid, dec: AttnDecoder):
    x = dec.top_block(pyramid[dec.top])
    for i, block in zip(range(dec.top - 1, dec.stop - 1, -1), dec.blocks):
        x = block(x, pyramid[i])
    return x


def decode_grafted(z, r5, block: DecoderBlock):
    if z.shape[-2:] != r5.shape[-2:]:
        raise DimensionError(f"grafted feature {z.shape[-2:]} and R5 {r5.shape[-2:]} differ spatially")
    return block(z, r5)


class CNNDecoder(Module):
    def __init__(self, rng, channels, c_out, levels=(4, 3, 2)):
        self.levels = levels
        self.blocks = [DecoderBlock(rng, [c_out, channels[i]], c_out) for i in levels]
        self.head = PredictionHead(rng, c_out)

    def __call__(self, grafted, pyramid, out_hw):
        return decode_cnn(grafted, pyramid, self, out_hw)


def decode_cnn(grafted, pyramid, dec: CNNDecoder, out_hw):
    x = grafted
    for i, block in zip(dec.levels, dec.blocks):
        x = block(x, pyramid[i])
    p = dec.head(x)
    return T.bilinear_resize(p, *out_hw)
