"""Modified 3D U-Net feature extractor.

Encoder: three blocks of 3/4/5 convolutions with widths (64, 128, 256)*s,
separated by average pooling with strides [2,2,2] and [1,2,2] ([D,H,W]).
Skip connections pass through transition layers (channel-reducing 3x3x3
convolutions to 1/4 of the source width).  Decoder: two transposed
convolutions (kernel == stride, strides [1,2,2] then [2,2,2]) each followed
by concatenation with the matching transition output and a 2-convolution
block with first-conv widths (128, 64)*s.  Every convolution is 3x3x3 with
padding 1 and is followed by ReLU then batch norm.  The final output is a
64s-channel map at the input size.

The channel-scale knob ``s`` shrinks every width uniformly so the same
topology trains on a desktop CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mrenet import tensor as T
from mrenet.layers import ConvBlock, UpConvBlock
from mrenet.params import ParamStore
from mrenet.tensor import ConfigError, Tensor

POOL_STRIDES = ((2, 2, 2), (1, 2, 2))
UPCONV_STRIDES = ((1, 2, 2), (2, 2, 2))
ENCODER_DEPTHS = (3, 4, 5)
ENCODER_WIDTHS = (64, 128, 256)
DECODER_WIDTHS = (128, 64)


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    channel_scale: float = 0.25

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        w = 64 * self.channel_scale
        if w < 4 or abs(w - round(w)) > 1e-9:
            raise ConfigError(
                f"channel_scale {self.channel_scale} must make 64*s an integer >= 4, "
                f"got {w}")

    def width(self, base: int) -> int:
        return int(round(base * self.channel_scale))


class Backbone:
    """Builds parameters into a store at construction; callable on patches."""

    def __init__(self, store: ParamStore, cfg: BackboneConfig,
                 rng: np.random.Generator, dtype=np.float64, prefix="backbone"):
        self.cfg = cfg
        w64, w128, w256 = (cfg.width(b) for b in ENCODER_WIDTHS)
        w128d, w64d = (cfg.width(b) for b in DECODER_WIDTHS)

        def conv(name, c_in, c_out):
            return ConvBlock(store, f"{prefix}.{name}", c_in, c_out, 3, rng,
                             dtype, padding=1)

        self.enc1 = [conv("enc1.conv0", cfg.in_channels, w64)] + \
            [conv(f"enc1.conv{i}", w64, w64) for i in (1, 2)]
        self.enc2 = [conv("enc2.conv0", w64, w128)] + \
            [conv(f"enc2.conv{i}", w128, w128) for i in (1, 2, 3)]
        self.enc3 = [conv("enc3.conv0", w128, w256)] + \
            [conv(f"enc3.conv{i}", w256, w256) for i in (1, 2, 3, 4)]

        # transition layers reduce each skip to 1/4 of its source width
        self.trans1 = conv("trans1", w64, w64 // 4)
        self.trans2 = conv("trans2", w128, w128 // 4)

        self.up1 = UpConvBlock(store, f"{prefix}.up1", w256, w256,
                               UPCONV_STRIDES[0], rng, dtype)
        self.dec1 = [conv("dec1.conv0", w256 + w128 // 4, w128d),
                     conv("dec1.conv1", w128d, w128d)]
        self.up2 = UpConvBlock(store, f"{prefix}.up2", w128d, w128d,
                               UPCONV_STRIDES[1], rng, dtype)
        self.dec2 = [conv("dec2.conv0", w128d + w64 // 4, w64d),
                     conv("dec2.conv1", w64d, w64d)]

        self.out_channels = w64d
        self.tap_channels = (w256, w128d)  # bottleneck and first decoder block

    def __call__(self, patch: Tensor, training: bool):
        """Returns (final [64s,D,H,W], decoder taps [bottleneck, dec1 output])."""
        x = patch
        for block in self.enc1:
            x = block(x, training)
        skip1 = x
        x = T.avg_pool3d(x, POOL_STRIDES[0])
        for block in self.enc2:
            x = block(x, training)
        skip2 = x
        x = T.avg_pool3d(x, POOL_STRIDES[1])
        for block in self.enc3:
            x = block(x, training)
        bottleneck = x

        x = self.up1(x, training)
        x = T.concat([x, self.trans2(skip2, training)], axis=-4)
        for block in self.dec1:
            x = block(x, training)
        dec1_out = x
        x = self.up2(x, training)
        x = T.concat([x, self.trans1(skip1, training)], axis=-4)
        for block in self.dec2:
            x = block(x, training)
        return x, [bottleneck, dec1_out]
