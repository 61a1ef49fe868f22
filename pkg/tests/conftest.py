import pytest

from diffperc.config import ModelConfig, RunConfig


def micro_run_config(**overrides) -> RunConfig:
    """Small-channel config: full 4-level geometry at 64x64 but cheap."""
    model = ModelConfig(
        image_side=64,
        codec_hidden=(8, 12, 16),
        unet_base_channels=8,
        unet_channel_multipliers=(1, 2, 4, 4),
        attn_heads=4,
        norm_groups=4,
        text_width=16,
        fpn_channels=8,
        timesteps=50,
    )
    defaults = dict(
        dataset={"name": "shapes_semseg", "n": 16, "classes": 6, "side": 64, "seed": 3},
        model=model,
        total_iters=6,
        batch_size=2,
        eval_interval=3,
        log_interval=1,
        seed=0,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


@pytest.fixture
def micro_cfg():
    return micro_run_config()
