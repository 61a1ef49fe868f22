"""Task heads and losses: FPN-style dense decoder, cross-entropy with
ignore handling, and the scale-invariant log-depth loss."""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor

IGNORE_INDEX = 255

TASKS = ("semseg", "refseg", "depth")


@dataclass
class HeadConfig:
    task: str = "semseg"
    num_classes: int = 2
    fpn_channels: int = 32
    norm_groups: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"head: task {self.task!r} not one of {TASKS}")

    @property
    def out_channels(self):
        return self.num_classes if self.task == "semseg" else 1


@dataclass
class DepthLossConfig:
    variance_weight: float = 0.85  # 1.0 gives full scale invariance
    scale: float = 10.0
    max_depth: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.variance_weight <= 1.0:
            raise ConfigError(
                f"depth loss: variance_weight must be in [0,1], got {self.variance_weight}"
            )


class _ConvBlock(Module):
    def __init__(self, cin, cout, groups, rng):
        self.conv = Conv2d(cin, cout, 3, rng)
        self.norm = GroupNorm(groups, cout)

    def __call__(self, x):
        return T.silu(self.norm(self.conv(x)))


class FPNHead(Module):
    """Project each level to a common width, refine, sum at the finest
    backbone resolution, then upsample with light convs to image resolution
    and project to the task's output channels.

    Level i gets i refinement conv blocks; coarser levels are nearest-
    upsampled to the finest feature side before summation.
    """

    def __init__(self, in_channels, cfg: HeadConfig, image_side, latent_side, rng):
        if len(in_channels) != 4:
            raise DimensionError(
                f"head: expected 4 feature levels, got {len(in_channels)}"
            )
        self.cfg = cfg
        self.in_channels = list(in_channels)
        self.image_side = image_side
        self.latent_side = latent_side
        w = cfg.fpn_channels
        g = cfg.norm_groups
        self.laterals = [Conv2d(c, w, 1, rng) for c in in_channels]
        self.refines = [
            [_ConvBlock(w, w, g, rng) for _ in range(level)] for level in range(1, 5)
        ]
        up_factor = image_side // latent_side
        stages = int(np.log2(up_factor))
        widths = [w] + [max(w // 2 ** (s + 1), 8) for s in range(stages)]
        self.up_blocks = [
            _ConvBlock(widths[s], widths[s + 1], min(g, widths[s + 1]), rng)
            for s in range(stages)
        ]
        self.classifier = Conv2d(widths[-1], cfg.out_channels, 1, rng)

    def __call__(self, features):
        if len(features) != 4:
            raise DimensionError(
                f"head: expected 4 feature levels, got {len(features)}"
            )
        for i, (feat, expect) in enumerate(zip(features, self.in_channels)):
            if feat.shape[1] != expect:
                raise DimensionError(
                    f"head: level {i + 1} has {feat.shape[1]} channels, head was "
                    f"built for {expect}"
                )
        finest = features[-1].shape[2]
        total = None
        for i, feat in enumerate(features):
            h = self.laterals[i](feat)
            for block in self.refines[i]:
                h = block(h)
            scale = finest // h.shape[2]
            if scale > 1:
                h = T.interpolate_nearest(h, scale)
            total = h if total is None else T.add(total, h)
        h = total
        for block in self.up_blocks:
            h = block(T.interpolate_nearest(h, 2))
        return self.classifier(h)


def cross_entropy_loss(logits: Tensor, labels, ignore_index=IGNORE_INDEX) -> Tensor:
    """Mean cross-entropy over non-ignored pixels.

    Multi-class logits (B, K, H, W) with integer labels, or the binary form
    on a single-channel logit map with {0,1} labels.
    """
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise DimensionError(f"cross_entropy: expected 4-d logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(
            f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}"
        )
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("cross_entropy: every pixel ignored, loss defined as 0")
        return T.mul(T.tsum(logits), 0.0)

    x = logits.data
    if logits.shape[1] == 1:
        # binary form on a single logit channel
        y = np.where(valid, labels, 0).astype(np.float32)
        z = x[:, 0]
        # stable softplus(z) - y*z
        per_pixel = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
        value = np.float32(per_pixel[valid].sum(dtype=np.float64) / n_valid)
        sig = 1.0 / (1.0 + np.exp(-z))
        grad_z = np.where(valid, (sig - y) / n_valid, 0.0).astype(np.float32)

        def backward(g):
            T.accumulate_grad(logits, g * grad_z[:, None])

        return T.custom_op(value, (logits,), backward)

    num_classes = logits.shape[1]
    if labels[valid].min() < 0 or labels[valid].max() >= num_classes:
        raise ConfigError(
            f"cross_entropy: labels outside [0, {num_classes}) and not ignore_index"
        )
    shifted = x - x.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe_labels[:, None], axis=1)[:, 0]
    value = np.float32(-picked[valid].sum(dtype=np.float64) / n_valid)

    softmax = np.exp(logp)
    onehot = np.zeros_like(softmax)
    np.put_along_axis(onehot, safe_labels[:, None], 1.0, axis=1)
    grad = ((softmax - onehot) * (valid[:, None] / n_valid)).astype(np.float32)

    def backward(g):
        T.accumulate_grad(logits, g * grad)

    return T.custom_op(value, (logits,), backward)


def silog_loss(pred: Tensor, gt, mask=None, cfg: DepthLossConfig | None = None) -> Tensor:
    """Scale-invariant log-depth loss.

    With g = log(pred) - log(gt) over masked pixels:
        scale * sqrt(mean(g^2) - variance_weight * mean(g)^2)
    """
    if cfg is None:
        cfg = DepthLossConfig()
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != pred.shape:
        raise DimensionError(f"silog: gt shape {gt.shape} != pred shape {pred.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("silog: empty mask, loss defined as 0")
        return T.mul(T.tsum(pred), 0.0)
    if np.any(pred.data[mask] <= 0) or np.any(gt[mask] <= 0):
        raise ConfigError("silog: depths must be positive on masked pixels")

    diff = np.zeros(pred.shape, dtype=np.float64)
    diff[mask] = np.log(pred.data.astype(np.float64)[mask]) - np.log(gt[mask])
    mean_sq = (diff[mask] ** 2).mean()
    mean = diff[mask].mean()
    variance_term = max(mean_sq - cfg.variance_weight * mean**2, 0.0)
    root = np.sqrt(variance_term)
    value = np.float32(cfg.scale * root)

    # d loss / d diff_i = scale * (diff_i - vw*mean) / (n * root)
    denom = max(root, 1e-12) * n
    grad_diff = np.where(mask, cfg.scale * (diff - cfg.variance_weight * mean) / denom, 0.0)
    grad_pred = (grad_diff / np.maximum(pred.data, 1e-12)).astype(np.float32)

    def backward(g):
        T.accumulate_grad(pred, g * grad_pred)

    return T.custom_op(value, (pred,), backward)


def depth_activation(raw: Tensor, cfg: DepthLossConfig) -> Tensor:
    """Map raw head output to a positive depth, clamped to (min, max_depth)."""
    return T.clip(T.exp(raw), 1e-3, cfg.max_depth)
