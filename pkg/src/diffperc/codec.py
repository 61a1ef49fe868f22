"""Frozen convolutional image<->latent codec.

Plain strided autoencoder: three stride-2 convolutions down to an 8x
smaller latent map, mirrored nearest-upsample decoder for round-trip
training and tests. No quantization: only the encoder is consumed by the
perception path, and it is frozen there.
"""

from dataclasses import dataclass

from . import tensor as T
from .errors import DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor


@dataclass
class CodecConfig:
    downsample_factor: int = 8
    latent_channels: int = 4
    image_channels: int = 3
    hidden: tuple = (24, 48, 64)


class LatentCodec(Module):
    def __init__(self, cfg: CodecConfig, rng):
        if cfg.downsample_factor != 2 ** (len(cfg.hidden)):
            raise DimensionError(
                f"codec: {len(cfg.hidden)} stride-2 stages give factor "
                f"{2 ** len(cfg.hidden)}, config says {cfg.downsample_factor}"
            )
        self.cfg = cfg
        h1, h2, h3 = cfg.hidden
        self.enc = [
            Conv2d(cfg.image_channels, h1, 3, rng, stride=2, padding=1),
            Conv2d(h1, h2, 3, rng, stride=2, padding=1),
            Conv2d(h2, h3, 3, rng, stride=2, padding=1),
        ]
        self.enc_out = Conv2d(h3, cfg.latent_channels, 3, rng)
        self.dec_in = Conv2d(cfg.latent_channels, h3, 3, rng)
        self.dec = [
            Conv2d(h3, h2, 3, rng),
            Conv2d(h2, h1, 3, rng),
            Conv2d(h1, h1 // 2, 3, rng),
        ]
        self.dec_out = Conv2d(h1 // 2, cfg.image_channels, 3, rng)

    def encode(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.image_channels:
            raise DimensionError(
                f"encode: expected Bx{self.cfg.image_channels}xHxW, got {x.shape}"
            )
        f = self.cfg.downsample_factor
        if x.shape[2] % f != 0 or x.shape[3] % f != 0:
            raise DimensionError(
                f"encode: spatial size {x.shape[2]}x{x.shape[3]} not divisible by {f}"
            )
        h = x
        for conv in self.enc:
            h = T.silu(conv(h))
        return self.enc_out(h)

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise DimensionError(
                f"decode: expected Bx{self.cfg.latent_channels}xhxw, got {z.shape}"
            )
        h = T.silu(self.dec_in(z))
        for conv in self.dec:
            h = T.silu(conv(T.interpolate_nearest(h, 2)))
        return self.dec_out(h)

    def reconstruction_loss(self, x: Tensor) -> Tensor:
        return T.tmean(T.square(T.sub(self.decode(self.encode(x)), x)))
