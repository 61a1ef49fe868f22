"""Four-resolution denoising UNet used as a perception backbone.

The network predicts noise for diffusion pretraining and simultaneously
exposes (a) the last feature map of each upsampling resolution and (b)
every cross-attention weight map, tagged by location (down / mid / up) and
resolution level. Level i has spatial side latent_side / 2**(4-i), so
level 4 matches the latent resolution and level 1 is the coarsest.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, GroupNorm, Linear, Module
from .tensor import Tensor
from .text import ConditioningFeatures


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4, 4)
    attn_heads: int = 4
    latent_channels: int = 4
    cond_width: int = 64
    time_width: int = 64
    norm_groups: int = 8

    def __post_init__(self):
        if len(self.channel_multipliers) != 4:
            raise ConfigError(
                f"UNetConfig: exactly 4 resolution levels required, got "
                f"{len(self.channel_multipliers)} multipliers"
            )

    @property
    def channels(self):
        return [self.base_channels * m for m in self.channel_multipliers]


@dataclass
class AttnRecord:
    location: str  # down | mid | up
    level: int  # 1 (coarsest) .. 4 (latent resolution)
    weights: Tensor  # B x num_prompts x H x W


@dataclass
class BackboneOutput:
    features: list  # [F1..F4], F4 at latent resolution
    attn_maps: list = field(default_factory=list)
    eps: Tensor = None


def timestep_embed(t: int, dim: int) -> Tensor:
    """Sinusoidal embedding of a scalar timestep, shape (1, dim)."""
    if t < 0:
        raise ConfigError(f"timestep_embed: t must be >= 0, got {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(1)])
    return Tensor(emb[None, :])


class ResBlock(Module):
    def __init__(self, cin, cout, time_hidden, groups, rng):
        self.norm1 = GroupNorm(groups, cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.time_proj = Linear(time_hidden, cout, rng)
        self.norm2 = GroupNorm(groups, cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.shortcut = Conv2d(cin, cout, 1, rng, bias=False) if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(T.silu(self.norm1(x)))
        tvec = self.time_proj(T.silu(temb))
        h = T.add(h, T.reshape(tvec, (1, tvec.shape[1], 1, 1)))
        h = self.conv2(T.silu(self.norm2(h)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.add(h, skip)


class CrossAttnBlock(Module):
    """Attention with spatial positions as queries and prompt features as
    keys/values; returns the residual output and the head-averaged weight
    map in prompt-leading layout."""

    def __init__(self, channels, cond_width, heads, groups, rng):
        if channels % heads != 0:
            raise DimensionError(
                f"cross-attention: {channels} channels not divisible by {heads} heads"
            )
        self.heads = heads
        self.norm = GroupNorm(groups, channels)
        self.to_q = Linear(channels, channels, rng)
        self.to_k = Linear(cond_width, channels, rng)
        self.to_v = Linear(cond_width, channels, rng)
        self.proj = Linear(channels, channels, rng)

    def __call__(self, x, cond: ConditioningFeatures):
        b, c, hh, ww = x.shape
        n = hh * ww
        heads = self.heads
        dh = c // heads
        feats = cond.features
        if feats.shape[-1] != self.to_k.weight.shape[0]:
            raise DimensionError(
                f"cross-attention: conditioning width {feats.shape[-1]} != "
                f"projection width {self.to_k.weight.shape[0]}"
            )
        num_prompts = feats.shape[-2]

        xn = self.norm(x)
        tokens = T.transpose(T.reshape(xn, (b, c, n)), (0, 2, 1))
        q = self.to_q(tokens)

        k = self.to_k(feats)
        v = self.to_v(feats)
        if feats.ndim == 2:
            k = T.expand0(k, b)
            v = T.expand0(v, b)
        elif feats.shape[0] != b:
            raise DimensionError(
                f"cross-attention: per-sample conditioning batch {feats.shape[0]} != {b}"
            )

        def split_heads(t, length):
            return T.reshape(
                T.transpose(T.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3)),
                (b * heads, length, dh),
            )

        q = split_heads(q, n)
        k = split_heads(k, num_prompts)
        v = split_heads(v, num_prompts)

        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), dh**-0.5)
        attn = T.softmax(scores, axis=2)  # (b*heads, n, num_prompts)

        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(T.reshape(out, (b, heads, n, dh)), (0, 2, 1, 3)), (b, n, c))
        out = self.proj(out)
        out = T.reshape(T.transpose(out, (0, 2, 1)), (b, c, hh, ww))

        weights = T.tmean(T.reshape(attn, (b, heads, n, num_prompts)), axis=1)
        weights = T.reshape(T.transpose(weights, (0, 2, 1)), (b, num_prompts, hh, ww))
        return T.add(x, out), weights


class DenoisingUNet(Module):
    def __init__(self, cfg: UNetConfig, rng):
        self.cfg = cfg
        ch = cfg.channels
        groups = cfg.norm_groups
        heads = cfg.attn_heads
        cond = cfg.cond_width
        self.time_hidden = 2 * cfg.time_width
        self.time_fc1 = Linear(cfg.time_width, self.time_hidden, rng)
        self.time_fc2 = Linear(self.time_hidden, self.time_hidden, rng)

        self.conv_in = Conv2d(cfg.latent_channels, ch[0], 3, rng)
        self.down_res = []
        self.down_attn = []
        self.downsamplers = []
        prev = ch[0]
        for pos in range(4):
            self.down_res.append(ResBlock(prev, ch[pos], self.time_hidden, groups, rng))
            self.down_attn.append(CrossAttnBlock(ch[pos], cond, heads, groups, rng))
            prev = ch[pos]
            if pos < 3:
                self.downsamplers.append(Conv2d(ch[pos], ch[pos], 3, rng, stride=2, padding=1))

        self.mid_res1 = ResBlock(ch[3], ch[3], self.time_hidden, groups, rng)
        self.mid_attn = CrossAttnBlock(ch[3], cond, heads, groups, rng)
        self.mid_res2 = ResBlock(ch[3], ch[3], self.time_hidden, groups, rng)

        self.up_res = []
        self.up_attn = []
        self.upsamplers = []
        current = ch[3]
        for pos in range(3, -1, -1):
            self.up_res.append(
                ResBlock(current + ch[pos], ch[pos], self.time_hidden, groups, rng)
            )
            self.up_attn.append(CrossAttnBlock(ch[pos], cond, heads, groups, rng))
            current = ch[pos]
            if pos > 0:
                self.upsamplers.append(Conv2d(ch[pos], ch[pos - 1], 3, rng))
                current = ch[pos - 1]

        self.norm_out = GroupNorm(groups, ch[0])
        self.conv_out = Conv2d(ch[0], cfg.latent_channels, 3, rng)

    def feature_channels(self):
        """Channel widths of [F1..F4]."""
        ch = self.cfg.channels
        return [ch[3], ch[2], ch[1], ch[0]]

    def __call__(self, z: Tensor, t: int, cond: ConditioningFeatures) -> BackboneOutput:
        if cond is None or cond.num_prompts < 1:
            raise ConfigError("unet: conditioning must contain at least one prompt")
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise DimensionError(
                f"unet: expected Bx{self.cfg.latent_channels}xhxw latent, got {z.shape}"
            )
        latent_side = z.shape[2]

        temb = timestep_embed(t, self.cfg.time_width)
        temb = self.time_fc2(T.silu(self.time_fc1(temb)))

        records = []
        h = self.conv_in(z)
        skips = []
        for pos in range(4):
            h = self.down_res[pos](h, temb)
            h, weights = self.down_attn[pos](h, cond)
            records.append(AttnRecord("down", 4 - pos, weights))
            skips.append(h)
            if pos < 3:
                h = self.downsamplers[pos](h)

        h = self.mid_res1(h, temb)
        h, weights = self.mid_attn(h, cond)
        records.append(AttnRecord("mid", 1, weights))
        h = self.mid_res2(h, temb)

        features = []
        for i, pos in enumerate(range(3, -1, -1)):
            skip = skips.pop()
            h = self.up_res[i](T.concat_channels(h, skip), temb)
            h, weights = self.up_attn[i](h, cond)
            level = 4 - pos
            records.append(AttnRecord("up", level, weights))
            features.append(h)
            if pos > 0:
                h = self.upsamplers[i](T.interpolate_nearest(h, 2))

        expected = latent_side // 8
        for i, f in enumerate(features):
            side = expected * 2**i
            if f.shape[2] != side:
                raise DimensionError(
                    f"unet: feature level {i + 1} has side {f.shape[2]}, expected {side}"
                )
        if features[-1].shape[2] != latent_side:
            raise DimensionError("unet: finest feature level must match latent resolution")

        eps = self.conv_out(T.silu(self.norm_out(h)))
        return BackboneOutput(features=features, attn_maps=records, eps=eps)
