"""Run configuration: nested dataclasses with JSON round-tripping."""

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .errors import ConfigError
from .guidance import GuidanceConfig
from .heads import TASKS, DepthLossConfig


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    base_lr: float = 2e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.kind.lower() != "adamw":
            raise ConfigError(f"optimizer: only adamw is supported, got {self.kind!r}")


@dataclass
class ScheduleConfig:
    power: float = 0.9
    min_lr: float = 1e-6
    warmup_iters: int | None = None  # None: scaled from the iteration budget


@dataclass
class PromptConfig:
    use_text_prompt: bool = True
    use_adapter: bool = True


@dataclass
class ModelConfig:
    image_side: int = 64
    latent_channels: int = 4
    codec_hidden: tuple = (24, 48, 64)
    unet_base_channels: int = 32
    unet_channel_multipliers: tuple = (1, 2, 4, 4)
    attn_heads: int = 4
    norm_groups: int = 8
    text_width: int = 64
    text_heads: int = 4
    text_depth: int = 2
    max_prompt_len: int = 16
    fpn_channels: int = 32
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class EvalConfig:
    crop: int = 64
    stride: int = 43
    use_slide: bool = True
    use_flip: bool = False


@dataclass
class RunConfig:
    task: str = "semseg"
    dataset: dict = field(default_factory=lambda: {
        "name": "shapes_semseg", "n": 512, "classes": 6, "side": 64, "seed": 0,
    })
    val_dataset: dict | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    backbone_lr_multiplier: float = 0.1
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    depth_loss: DepthLossConfig = field(default_factory=DepthLossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    total_iters: int = 2000
    batch_size: int = 8
    eval_interval: int = 500
    log_interval: int = 20
    seed: int = 0
    vocab_path: str | None = None
    run_id: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"config: task {self.task!r} not one of {TASKS}")

    def resolved_run_id(self):
        return self.run_id or f"{self.task}-s{self.seed}"


_NESTED = {
    "optimizer": OptimizerConfig,
    "lr_schedule": ScheduleConfig,
    "guidance": GuidanceConfig,
    "prompts": PromptConfig,
    "model": ModelConfig,
    "depth_loss": DepthLossConfig,
    "eval": EvalConfig,
}


def _build(dc_cls, data: dict):
    known = {f.name for f in fields(dc_cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{dc_cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get(key)
        if nested is not None and isinstance(value, dict):
            kwargs[key] = _build(nested, value)
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) and key.endswith(
                ("betas", "hidden", "multipliers")
            ) else value
    return dc_cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, dict(data))


def config_to_dict(cfg: RunConfig) -> dict:
    def encode(obj):
        if is_dataclass(obj):
            return {k: encode(v) for k, v in asdict(obj).items()}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return encode(cfg)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
