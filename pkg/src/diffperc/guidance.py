"""Explicit semantic guidance from cross-attention maps.

Maps matching the configured source are averaged per resolution level
(equally weighting every captured map, i.e. across blocks as well as the
head-averaging already done at capture) and concatenated channel-wise onto
the hierarchical features. The coarsest level is skipped for down/up
sources because its resolution is too low to localize anything; selecting
the mid source opts into those coarse maps explicitly. Levels above
``max_side_included`` are skipped as well, mirroring the default that
leaves out the largest maps.
"""

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError

SOURCES = ("none", "mid", "down", "up", "up_down")


@dataclass
class GuidanceConfig:
    source: str = "up_down"
    max_side_included: int | None = None  # default: half the latent side
    enabled: bool = True

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(
                f"guidance: source {self.source!r} not one of {SOURCES}"
            )

    def wanted_locations(self):
        if self.source == "up_down":
            return ("up", "down")
        return (self.source,)


def average_maps(records, cfg: GuidanceConfig, latent_side=None):
    """Arithmetic mean of matching attention maps per resolution level.

    Returns {level: tensor of shape B x num_prompts x H x W}; empty when the
    source is none or guidance is disabled.
    """
    if not cfg.enabled or cfg.source == "none":
        return {}
    wanted = cfg.wanted_locations()
    selected = [r for r in records if r.location in wanted]
    if latent_side is None and records:
        latent_side = max(r.weights.shape[2] for r in records)
    max_side = cfg.max_side_included
    if max_side is None:
        max_side = max(latent_side // 2, 1)

    by_level = {}
    for rec in selected:
        side = rec.weights.shape[2]
        if side > max_side:
            continue
        if cfg.source != "mid" and rec.level == 1:
            continue  # coarsest maps excluded unless explicitly requested
        by_level.setdefault(rec.level, []).append(rec.weights)

    averaged = {}
    for level in sorted(by_level):
        maps = by_level[level]
        total = maps[0]
        for m in maps[1:]:
            total = T.add(total, m)
        averaged[level] = T.mul(total, 1.0 / len(maps))
    return averaged


def fuse(features, averaged):
    """Concatenate averaged maps onto features; untouched levels pass through."""
    fused = []
    for i, feat in enumerate(features):
        level = i + 1
        if level in averaged:
            amap = averaged[level]
            if amap.shape[2:] != feat.shape[2:]:
                raise DimensionError(
                    f"fuse: level {level} map side {amap.shape[2:]} != "
                    f"feature side {feat.shape[2:]}"
                )
            fused.append(T.concat_channels(feat, amap))
        else:
            fused.append(feat)
    return fused


def fused_channel_widths(feature_channels, num_prompts, cfg: GuidanceConfig, latent_side):
    """Head input widths per level for a given guidance config and prompt count."""
    levels = fused_levels(cfg, latent_side)
    return [
        c + (num_prompts if (i + 1) in levels else 0)
        for i, c in enumerate(feature_channels)
    ]


def fused_levels(cfg: GuidanceConfig, latent_side):
    """Which levels receive a concatenated map under this config."""
    if not cfg.enabled or cfg.source == "none":
        return set()
    max_side = cfg.max_side_included
    if max_side is None:
        max_side = max(latent_side // 2, 1)
    levels = set()
    for level in range(1, 5):
        side = latent_side // 2 ** (4 - level)
        if side < 1 or side > max_side:
            continue
        if cfg.source == "mid":
            if level == 1:
                levels.add(level)
        elif level > 1:
            levels.add(level)
    return levels
