"""Training loops, metric logging, checkpointing, and the ablation runner."""

import json
import os
from dataclasses import replace

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import RunConfig, config_to_dict
from .data import TaskBatch, dataset_from_spec
from .diffusion import denoising_loss, linear_schedule
from .errors import ConfigError
from .guidance import GuidanceConfig
from .optim import AdamW, default_warmup, poly_lr
from .pipeline import PerceptionModel, evaluate, task_loss
from .rng import Rng, spawn, step_rng
from .tensor import Tensor
from .text import PromptSet, Vocab


class MetricLog:
    """Append-only (run_id, step, metric, value) rows with stable formatting."""

    def __init__(self, run_id):
        self.run_id = run_id
        self.rows = []

    def add(self, step, metric, value):
        self.rows.append((self.run_id, int(step), metric, float(value)))

    def value_at(self, step, metric):
        for run_id, s, m, v in self.rows:
            if s == step and m == metric:
                return v
        raise KeyError(f"no {metric!r} row at step {step}")

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("run_id,step,metric,value\n")
            for run_id, step, metric, value in self.rows:
                f.write(f"{run_id},{step},{metric},{value:.10g}\n")


def write_summary(path, summary):
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def _batch_for_step(n, batch_size, seed, step):
    """Index batch for a step: reshuffled epochs, derivable from (seed, step)."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    order = np.asarray(step_rng(seed, "order", epoch).permutation(n))
    start = pos * batch_size
    return order[start : start + batch_size]


def _make_batch(dataset, idx, seed, step, augment) -> TaskBatch:
    images = dataset.images[idx].copy()
    labels = dataset.labels[idx].copy()
    if augment:
        flips = np.asarray(step_rng(seed, "flip", step).uniform(0, 1, (len(idx),))) < 0.5
        images[flips] = images[flips][..., ::-1]
        labels[flips] = labels[flips][..., ::-1]
    return TaskBatch(
        images=Tensor(images),
        labels=labels,
        task=dataset.task,
        prompts=[dataset.prompts[i] for i in idx] if dataset.prompts else None,
        captions=[dataset.captions[i] for i in idx] if dataset.captions else None,
    )


def _dump_named(named):
    return {name: p.data.copy() for name, p in named}


def _load_named(named, tensors, prefix="", strict=True):
    loaded = 0
    for name, p in named:
        key = name if name in tensors else f"{prefix}{name}"
        if key not in tensors:
            if strict:
                raise ConfigError(f"checkpoint missing tensor {key!r}")
            continue
        arr = tensors[key]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ConfigError(
                f"checkpoint tensor {key!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data[...] = arr
        loaded += 1
    return loaded


def params_fingerprint(named):
    """Bytes snapshot per parameter, for bitwise freeze audits."""
    return {name: p.data.tobytes() for name, p in named}


def split_train_val(cfg: RunConfig):
    train = dataset_from_spec(cfg.dataset)
    if cfg.val_dataset:
        val = dataset_from_spec(cfg.val_dataset)
    else:
        spec = dict(cfg.dataset)
        spec["n"] = max(16, spec.get("n", 256) // 8)
        spec["seed"] = spec.get("seed", 0) + 7919
        val = dataset_from_spec(spec)
    return train, val


# ---------------------------------------------------------------------------
# stage 1: codec reconstruction pretraining
# ---------------------------------------------------------------------------


def pretrain_codec(cfg: RunConfig, out_dir, deterministic=False):
    os.makedirs(out_dir, exist_ok=True)
    dataset, val = split_train_val(cfg)
    init_rng, data_rng, _ = spawn(cfg.seed, 3)
    model = PerceptionModel(cfg, dataset.class_names, cfg.seed)
    codec = model.codec

    params = [p for _, p in codec.named_parameters("codec.")]
    opt = AdamW([{"params": params, "lr_scale": 1.0}],
                betas=tuple(cfg.optimizer.betas), weight_decay=cfg.optimizer.weight_decay)
    warmup = cfg.lr_schedule.warmup_iters
    if warmup is None:
        warmup = default_warmup(cfg.total_iters)

    log = MetricLog(cfg.resolved_run_id() + "-codec")
    for step in range(cfg.total_iters):
        idx = _batch_for_step(len(dataset), cfg.batch_size, cfg.seed, step)
        batch = _make_batch(dataset, idx, cfg.seed, step, augment=True)
        loss = codec.reconstruction_loss(batch.images)
        opt.zero_grad()
        loss.backward()
        lr = poly_lr(step, cfg.total_iters, cfg.optimizer.base_lr,
                     cfg.lr_schedule.power, cfg.lr_schedule.min_lr, warmup)
        opt.step(lr)
        if step % cfg.log_interval == 0 or step == cfg.total_iters - 1:
            log.add(step, "recon_loss", loss.item())

    with T.no_grad():
        val_loss = codec.reconstruction_loss(Tensor(val.images)).item()
    log.add(cfg.total_iters, "val_recon_mse", val_loss)

    tensors = _dump_named(codec.named_parameters("codec."))
    flags = {name: {"frozen": True, "lr_group": None} for name in tensors}
    bundle = CheckpointBundle(
        tensors=tensors, flags=flags, config=config_to_dict(cfg),
        rng={"data": data_rng.state()}, step=cfg.total_iters,
    )
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt, bundle)
    log.write_csv(os.path.join(out_dir, "metrics.csv"))
    summary = {"stage": "pretrain-codec", "val_recon_mse": val_loss,
               "iters": cfg.total_iters, "checkpoint": ckpt}
    write_summary(os.path.join(out_dir, "summary.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# stage 2: toy generative pretraining of backbone + text encoder
# ---------------------------------------------------------------------------


def pretrain_toy(cfg: RunConfig, codec_ckpt, out_dir, deterministic=False, resume=None,
                 stop_after=None):
    """Train the backbone and text encoder on the denoising objective.

    ``stop_after`` interrupts the run early (checkpointing at that step);
    passing the saved bundle back as ``resume`` continues the identical
    trajectory because every per-step draw is derived from (seed, step).
    """
    os.makedirs(out_dir, exist_ok=True)
    codec_bundle = load_checkpoint(codec_ckpt) if isinstance(codec_ckpt, str) else codec_ckpt
    if not codec_bundle.namespace("codec."):
        raise ConfigError("pretrain-toy: init checkpoint has no codec tensors")

    dataset, _ = split_train_val(cfg)
    model = PerceptionModel(cfg, dataset.class_names, cfg.seed)
    _load_named(model.codec.named_parameters("codec."), codec_bundle.tensors)
    model.codec.freeze()

    _, data_rng, noise_rng = spawn(cfg.seed, 3)
    schedule = linear_schedule(cfg.model.timesteps, cfg.model.beta_start, cfg.model.beta_end)

    trainable = list(model.unet.named_parameters("unet.")) + list(
        model.text_encoder.named_parameters("text.")
    )
    opt = AdamW([{"params": [p for _, p in trainable], "lr_scale": 1.0}],
                betas=tuple(cfg.optimizer.betas), weight_decay=cfg.optimizer.weight_decay)

    start_step = 0
    if resume is not None:
        _load_named(trainable, resume.tensors)
        opt.load_state_arrays(resume.tensors, resume.step)
        start_step = resume.step

    warmup = cfg.lr_schedule.warmup_iters
    if warmup is None:
        warmup = default_warmup(cfg.total_iters)

    log = MetricLog(cfg.resolved_run_id() + "-toy")
    losses = []
    end_step = cfg.total_iters if stop_after is None else min(stop_after, cfg.total_iters)
    for step in range(start_step, end_step):
        idx = _batch_for_step(len(dataset), cfg.batch_size, cfg.seed, step)
        batch = _make_batch(dataset, idx, cfg.seed, step, augment=False)
        if batch.captions is None:
            raise ConfigError("pretrain-toy: dataset provides no captions")
        with T.no_grad():
            z0 = model.codec.encode(batch.images)
        z0 = z0.detach()
        caption_sets = batch.captions
        set_size = len(caption_sets[0])
        flat = [p for caps in caption_sets for p in caps]
        cond = model.text_encoder(PromptSet(flat))
        cond.features = T.reshape(cond.features, (len(caption_sets), set_size, -1))
        step_noise = step_rng(cfg.seed, "noise", step)
        noise_rng.draws += 1
        t = int(step_noise.integers(1, schedule.num_steps + 1))
        eps = Tensor(step_noise.normal(z0.shape))
        loss = denoising_loss(model.unet, z0, cond, t, eps, schedule)
        opt.zero_grad()
        loss.backward()
        lr = poly_lr(step, cfg.total_iters, cfg.optimizer.base_lr,
                     cfg.lr_schedule.power, cfg.lr_schedule.min_lr, warmup)
        opt.step(lr)
        losses.append(loss.item())
        if step % cfg.log_interval == 0 or step == cfg.total_iters - 1:
            log.add(step, "dm_loss", loss.item())

    tensors = {}
    tensors.update(_dump_named(model.codec.named_parameters("codec.")))
    tensors.update(_dump_named(model.text_encoder.named_parameters("text.")))
    tensors.update(_dump_named(model.unet.named_parameters("unet.")))
    tensors.update(opt.state_arrays())
    flags = {}
    for name in tensors:
        if name.startswith("codec.") or name.startswith("text."):
            flags[name] = {"frozen": True, "lr_group": None}
        elif name.startswith("unet."):
            flags[name] = {"frozen": False, "lr_group": "backbone_0.1x"}
    config = config_to_dict(cfg)
    config["vocab_tokens"] = model.text_encoder.vocab.tokens
    bundle = CheckpointBundle(
        tensors=tensors, flags=flags, config=config,
        rng={"data": data_rng.state(), "noise": noise_rng.state()},
        step=end_step,
    )
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt, bundle)
    vocab_path = os.path.join(out_dir, "vocab.txt")
    model.text_encoder.vocab.save(vocab_path)
    log.write_csv(os.path.join(out_dir, "metrics.csv"))

    window = min(100, max(len(losses) // 10, 1))
    summary = {
        "stage": "pretrain-toy",
        "iters": end_step,
        "loss_first_window": float(np.mean(losses[:window])) if losses else None,
        "loss_last_window": float(np.mean(losses[-window:])) if losses else None,
        "checkpoint": ckpt,
        "vocab": vocab_path,
        "losses": [round(v, 6) for v in losses],
    }
    write_summary(os.path.join(out_dir, "summary.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# stage 3: perception training
# ---------------------------------------------------------------------------


def build_perception_model(cfg: RunConfig, init_bundle: CheckpointBundle, class_names):
    vocab = None
    tokens = init_bundle.config.get("vocab_tokens")
    if tokens:
        vocab = Vocab.__new__(Vocab)
        vocab.tokens = list(tokens)
        vocab.index = {tok: i for i, tok in enumerate(vocab.tokens)}
    elif cfg.vocab_path:
        vocab = Vocab.load(cfg.vocab_path)
    model = PerceptionModel(cfg, class_names, cfg.seed, vocab=vocab)
    _load_named(model.codec.named_parameters("codec."), init_bundle.tensors)
    _load_named(model.text_encoder.named_parameters("text."), init_bundle.tensors)
    _load_named(model.unet.named_parameters("unet."), init_bundle.tensors)
    # adapter / head / null prompt keep their seed-derived init
    for name in ("adapter.", "head.", "null_prompt"):
        if any(k.startswith(name) for k in init_bundle.tensors):
            _load_named(model.named_parameters(), init_bundle.tensors, strict=False)
            break
    model.freeze_pretrained()
    return model


def train_perception(cfg: RunConfig, init, out_dir, deterministic=False):
    os.makedirs(out_dir, exist_ok=True)
    init_bundle = load_checkpoint(init) if isinstance(init, str) else init
    for namespace in ("codec.", "text.", "unet."):
        if not init_bundle.namespace(namespace):
            raise ConfigError(f"train: init checkpoint missing {namespace}* tensors")

    train_set, val_set = split_train_val(cfg)
    if train_set.task != cfg.task:
        raise ConfigError(
            f"train: dataset task {train_set.task!r} does not match config task {cfg.task!r}"
        )
    model = build_perception_model(cfg, init_bundle, train_set.class_names)

    _, data_rng, noise_rng = spawn(cfg.seed, 3)
    noise_draws_before = noise_rng.draws

    roles = model.role_map()
    base_params, backbone_params = [], []
    for name, p in model.named_parameters():
        frozen, group = roles[name]
        if frozen:
            continue
        (backbone_params if group == "backbone_0.1x" else base_params).append(p)
    opt = AdamW(
        [
            {"params": base_params, "lr_scale": 1.0},
            {"params": backbone_params, "lr_scale": cfg.backbone_lr_multiplier},
        ],
        betas=tuple(cfg.optimizer.betas),
        weight_decay=cfg.optimizer.weight_decay,
    )
    warmup = cfg.lr_schedule.warmup_iters
    if warmup is None:
        warmup = default_warmup(cfg.total_iters)

    frozen_before = params_fingerprint(
        list(model.codec.named_parameters("codec."))
        + list(model.text_encoder.named_parameters("text."))
    )

    log = MetricLog(cfg.resolved_run_id())
    eval_history = {}
    for step in range(cfg.total_iters):
        idx = _batch_for_step(len(train_set), cfg.batch_size, cfg.seed, step)
        batch = _make_batch(train_set, idx, cfg.seed, step,
                            augment=cfg.task != "refseg")
        logits = model.forward(batch.images, batch.prompts)
        loss = task_loss(model, logits, batch)
        opt.zero_grad()
        loss.backward()
        lr = poly_lr(step, cfg.total_iters, cfg.optimizer.base_lr,
                     cfg.lr_schedule.power, cfg.lr_schedule.min_lr, warmup)
        opt.step(lr)
        if step % cfg.log_interval == 0 or step == cfg.total_iters - 1:
            log.add(step, "loss", loss.item())
            log.add(step, "lr_base", lr)
            log.add(step, "lr_backbone", lr * cfg.backbone_lr_multiplier)
        done = step + 1
        if done % cfg.eval_interval == 0 or done == cfg.total_iters:
            if done not in eval_history:
                scores = evaluate(model, val_set)
                eval_history[done] = scores
                for metric, value in scores.items():
                    log.add(done, metric, value)

    frozen_after = params_fingerprint(
        list(model.codec.named_parameters("codec."))
        + list(model.text_encoder.named_parameters("text."))
    )
    frozen_ok = frozen_before == frozen_after
    noise_draws = noise_rng.draws - noise_draws_before

    tensors = _dump_named(model.named_parameters())
    tensors.update(opt.state_arrays())
    flags = {
        name: {"frozen": frozen, "lr_group": group}
        for name, (frozen, group) in roles.items()
    }
    bundle = CheckpointBundle(
        tensors=tensors, flags=flags, config=config_to_dict(cfg),
        rng={"data": data_rng.state(), "noise": noise_rng.state()},
        step=cfg.total_iters,
    )
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt, bundle)
    log.write_csv(os.path.join(out_dir, "metrics.csv"))
    summary = {
        "stage": "train",
        "task": cfg.task,
        "iters": cfg.total_iters,
        "eval": {str(k): v for k, v in sorted(eval_history.items())},
        "final": eval_history.get(cfg.total_iters, {}),
        "frozen_parameters_unchanged": frozen_ok,
        "noise_draws_on_perception_path": noise_draws,
        "checkpoint": ckpt,
        "deterministic": bool(deterministic),
    }
    write_summary(os.path.join(out_dir, "summary.json"), summary)
    return summary, log


def evaluate_checkpoint(ckpt_path, out_dir, dataset_spec=None, cfg: RunConfig | None = None):
    os.makedirs(out_dir, exist_ok=True)
    bundle = load_checkpoint(ckpt_path)
    if cfg is None:
        from .config import config_from_dict

        saved = dict(bundle.config)
        saved.pop("vocab_tokens", None)
        cfg = config_from_dict(saved)
    if dataset_spec is None:
        _, val_set = split_train_val(cfg)
    else:
        val_set = dataset_from_spec(dataset_spec)
    model = build_perception_model(cfg, bundle, val_set.class_names)
    scores = evaluate(model, val_set)
    log = MetricLog(cfg.resolved_run_id() + "-eval")
    for metric, value in scores.items():
        log.add(bundle.step, metric, value)
    log.write_csv(os.path.join(out_dir, "metrics.csv"))
    write_summary(os.path.join(out_dir, "summary.json"),
                  {"stage": "eval", "scores": scores, "checkpoint": ckpt_path})
    return scores


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

ABLATION_GRID = [
    {"row": 1, "use_text_prompt": False, "use_adapter": False, "source": "none"},
    {"row": 2, "use_text_prompt": True, "use_adapter": False, "source": "none"},
    {"row": 3, "use_text_prompt": True, "use_adapter": True, "source": "none"},
    {"row": 4, "use_text_prompt": True, "use_adapter": True, "source": "mid"},
    {"row": 5, "use_text_prompt": True, "use_adapter": True, "source": "down"},
    {"row": 6, "use_text_prompt": True, "use_adapter": True, "source": "up"},
    {"row": 7, "use_text_prompt": True, "use_adapter": True, "source": "up_down"},
]


def ablation_config(cfg: RunConfig, row: dict, seed: int, early: int, late: int) -> RunConfig:
    return replace(
        cfg,
        seed=seed,
        total_iters=late,
        eval_interval=early,
        prompts=replace(cfg.prompts, use_text_prompt=row["use_text_prompt"],
                        use_adapter=row["use_adapter"]),
        guidance=GuidanceConfig(source=row["source"],
                                max_side_included=cfg.guidance.max_side_included,
                                enabled=True),
        run_id=f"ablate-r{row['row']}-s{seed}",
    )


def run_ablation(cfg: RunConfig, init, out_dir, seeds=(0,), early=None, late=None,
                 rows=None, deterministic=False):
    """One perception run per grid row and seed; reports the segmentation
    score at the early and late checkpoints."""
    os.makedirs(out_dir, exist_ok=True)
    if cfg.task != "semseg":
        raise ConfigError("ablation grid runs on the semseg task")
    early = early or max(cfg.total_iters // 2, 1)
    late = late or cfg.total_iters
    if late % early != 0:
        raise ConfigError(f"ablation: late iters {late} must be a multiple of early {early}")
    init_bundle = load_checkpoint(init) if isinstance(init, str) else init
    grid = [r for r in ABLATION_GRID if rows is None or r["row"] in rows]

    results = []
    for row in grid:
        for seed in seeds:
            run_cfg = ablation_config(cfg, row, seed, early, late)
            run_dir = os.path.join(out_dir, f"row{row['row']}_seed{seed}")
            summary, log = train_perception(run_cfg, init_bundle, run_dir,
                                            deterministic=deterministic)
            results.append({
                "row": row["row"],
                "use_text_prompt": row["use_text_prompt"],
                "use_adapter": row["use_adapter"],
                "cross_attn": row["source"],
                "seed": seed,
                "miou_early": log.value_at(early, "miou"),
                "miou_late": log.value_at(late, "miou"),
            })

    table_path = os.path.join(out_dir, "ablation.csv")
    with open(table_path, "w") as f:
        f.write("row,use_text_prompt,use_adapter,cross_attn,seed,miou_early,miou_late\n")
        for r in results:
            f.write(
                f"{r['row']},{int(r['use_text_prompt'])},{int(r['use_adapter'])},"
                f"{r['cross_attn']},{r['seed']},{r['miou_early']:.10g},{r['miou_late']:.10g}\n"
            )
    means = {}
    for r in results:
        means.setdefault(r["row"], []).append((r["miou_early"], r["miou_late"]))
    summary = {
        "stage": "ablate",
        "rows": {
            str(row): {
                "miou_early_mean": float(np.mean([e for e, _ in vals])),
                "miou_late_mean": float(np.mean([l for _, l in vals])),
            }
            for row, vals in sorted(means.items())
        },
        "table": table_path,
        "seeds": list(seeds),
        "early": early,
        "late": late,
    }
    write_summary(os.path.join(out_dir, "summary.json"), summary)
    return summary, results
