"""Perception model assembly: frozen codec + prompts + backbone + guidance + head.

The perception forward pass never samples noise: images are encoded to the
latent space and fed to the backbone at timestep zero.
"""

import numpy as np

from . import tensor as T
from .codec import CodecConfig, LatentCodec
from .config import RunConfig
from .data import prompt_words
from .errors import ConfigError
from .guidance import average_maps, fuse, fused_channel_widths
from .heads import FPNHead, HeadConfig, cross_entropy_loss, depth_activation, silog_loss
from .metrics import ConfusionState, depth_metrics, flip_average, miou, oiou, slide_inference
from .nn import Module, Parameter
from .rng import Rng, spawn
from .text import ConditioningFeatures, PromptSet, TextAdapter, TextEncoder, Vocab, build_prompts
from .unet import DenoisingUNet, UNetConfig


class PerceptionModel(Module):
    """End-to-end model for one task.

    Each component draws its initialization from its own seeded stream, so
    toggling one component (say, the adapter) leaves every other
    component's parameters untouched for the same seed — ablation rows then
    differ only in the ablated part.
    """

    def __init__(self, cfg: RunConfig, class_names, seed: int, vocab: Vocab | None = None):
        m = cfg.model
        self.cfg = cfg
        self.class_names = list(class_names)
        codec_rng, text_rng, unet_rng, adapter_rng, null_rng, head_rng = spawn(seed, 6)
        self.codec = LatentCodec(
            CodecConfig(latent_channels=m.latent_channels, hidden=tuple(m.codec_hidden)),
            codec_rng,
        )
        if vocab is None:
            vocab = Vocab.from_prompt_words(prompt_words())
        self.text_encoder = TextEncoder(
            vocab, width=m.text_width, heads=m.text_heads, depth=m.text_depth,
            max_len=m.max_prompt_len, rng=text_rng,
        )
        self.unet = DenoisingUNet(
            UNetConfig(
                base_channels=m.unet_base_channels,
                channel_multipliers=tuple(m.unet_channel_multipliers),
                attn_heads=m.attn_heads,
                latent_channels=m.latent_channels,
                cond_width=m.text_width,
                norm_groups=m.norm_groups,
            ),
            unet_rng,
        )
        self.adapter = TextAdapter(m.text_width, adapter_rng) if cfg.prompts.use_adapter else None
        if cfg.prompts.use_text_prompt:
            self.null_prompt = None
        else:
            # learned stand-in for an empty prompt: a single trainable row
            self.null_prompt = Parameter(null_rng.normal((1, m.text_width)) * 0.02)

        self.latent_side = m.image_side // self.codec.cfg.downsample_factor
        num_prompts = self._prompt_count()
        widths = fused_channel_widths(
            self.unet.feature_channels(), num_prompts, cfg.guidance, self.latent_side
        )
        self.head = FPNHead(
            widths,
            HeadConfig(task=cfg.task, num_classes=len(class_names),
                       fpn_channels=m.fpn_channels, norm_groups=m.norm_groups),
            m.image_side,
            self.latent_side,
            head_rng,
        )
        self._cond_cache = {}

    def _prompt_count(self):
        if not self.cfg.prompts.use_text_prompt:
            return 1
        return len(self.class_names) if self.cfg.task == "semseg" else 1

    # -- parameter roles -------------------------------------------------
    def role_map(self):
        """name -> (frozen, lr_group) for every parameter namespace."""
        roles = {}
        for name, _ in self.codec.named_parameters("codec."):
            roles[name] = (True, None)
        for name, _ in self.text_encoder.named_parameters("text."):
            roles[name] = (True, None)
        for name, _ in self.unet.named_parameters("unet."):
            roles[name] = (False, "backbone_0.1x")
        if self.adapter is not None:
            for name, _ in self.adapter.named_parameters("adapter."):
                roles[name] = (False, "base")
        if self.null_prompt is not None:
            roles["null_prompt"] = (False, "base")
        for name, _ in self.head.named_parameters("head."):
            roles[name] = (False, "base")
        return roles

    def named_parameters(self, prefix=""):
        yield from self.codec.named_parameters(f"{prefix}codec.")
        yield from self.text_encoder.named_parameters(f"{prefix}text.")
        yield from self.unet.named_parameters(f"{prefix}unet.")
        if self.adapter is not None:
            yield from self.adapter.named_parameters(f"{prefix}adapter.")
        if self.null_prompt is not None:
            yield f"{prefix}null_prompt", self.null_prompt
        yield from self.head.named_parameters(f"{prefix}head.")

    def freeze_pretrained(self):
        self.codec.freeze()
        self.text_encoder.freeze()

    # -- conditioning ------------------------------------------------------
    def _encode_cached(self, prompt: str):
        hit = self._cond_cache.get(prompt)
        if hit is None:
            with T.no_grad():
                cond = self.text_encoder(PromptSet([prompt]))
            hit = cond.features.data[0].copy()
            self._cond_cache[prompt] = hit
        return hit

    def conditioning(self, batch_prompts=None) -> ConditioningFeatures:
        """Build the conditioning matrix for one batch.

        semseg uses the shared class-name prompt set; refseg/depth take one
        prompt per sample. With prompts disabled, the learned null row is
        shared by every sample. The frozen encoder output is cached per
        prompt string; the adapter (when present) stays in the graph.
        """
        if not self.cfg.prompts.use_text_prompt:
            cond = ConditioningFeatures(self.null_prompt)
        elif self.cfg.task == "semseg":
            prompts = build_prompts(self.class_names, "semseg")
            rows = np.stack([self._encode_cached(p) for p in prompts.entries])
            cond = ConditioningFeatures(T.Tensor(rows), prompts)
        else:
            if batch_prompts is None:
                raise ConfigError("conditioning: this task needs per-sample prompts")
            mode = self.cfg.task
            entries = [build_prompts([p], mode).entries[0] for p in batch_prompts]
            rows = np.stack([self._encode_cached(p) for p in entries])[:, None, :]
            cond = ConditioningFeatures(T.Tensor(rows), PromptSet(entries))
        if self.adapter is not None:
            cond = self.adapter(cond)
        return cond

    # -- forward -----------------------------------------------------------
    def forward(self, images: T.Tensor, batch_prompts=None):
        """Images -> task logits, via the timestep-0 backbone path."""
        with T.no_grad():
            latents = self.codec.encode(images)
        latents = latents.detach()
        cond = self.conditioning(batch_prompts)
        out = self.unet(latents, 0, cond)
        averaged = average_maps(out.attn_maps, self.cfg.guidance, self.latent_side)
        fused = fuse(out.features, averaged)
        return self.head(fused)

    def predict(self, image: np.ndarray, prompt=None):
        """Single-image numpy prediction (logits / raw depth output)."""
        with T.no_grad():
            logits = self.forward(
                T.Tensor(image[None]),
                None if prompt is None else [prompt],
            )
        return logits.data[0]


def task_loss(model: PerceptionModel, logits, batch: "TaskBatch"):
    cfg = model.cfg
    if cfg.task in ("semseg", "refseg"):
        return cross_entropy_loss(logits, batch.labels)
    depth = depth_activation(logits, cfg.depth_loss)
    gt = batch.labels[:, None]
    return silog_loss(depth, gt, gt > 0, cfg.depth_loss)


def evaluate(model: PerceptionModel, dataset, eval_cfg=None) -> dict:
    """Full-split evaluation with the configured test-time protocol."""
    cfg = model.cfg
    eval_cfg = eval_cfg or cfg.eval
    task = cfg.task

    def run_image(i):
        image = dataset.images[i]
        prompt = dataset.prompts[i] if dataset.prompts else None

        def window_predict(win):
            return model.predict(win, prompt)

        if eval_cfg.use_flip:
            def base_predict(img):
                if eval_cfg.use_slide:
                    out, _ = slide_inference(window_predict, img, eval_cfg.crop, eval_cfg.stride)
                    return out
                return window_predict(img)

            return flip_average(base_predict, image)
        if eval_cfg.use_slide:
            out, _ = slide_inference(window_predict, image, eval_cfg.crop, eval_cfg.stride)
            return out
        return window_predict(image)

    if task == "semseg":
        conf = ConfusionState(len(model.class_names))
        for i in range(len(dataset)):
            pred = run_image(i).argmax(axis=0)
            conf.update(dataset.labels[i], pred)
        scores = {
            "miou": miou(conf),
            "oiou": oiou(conf.intersections(), conf.unions()),
        }
        inter, union = conf.intersections(), conf.unions()
        for k in range(len(model.class_names)):
            if union[k] > 0:
                scores[f"iou_class{k}"] = float(inter[k] / union[k])
        return scores
    if task == "refseg":
        conf = ConfusionState(2)
        for i in range(len(dataset)):
            pred = (run_image(i)[0] > 0).astype(np.int64)
            conf.update(dataset.labels[i].astype(np.int64), pred)
        inter, union = conf.intersections(), conf.unions()
        return {
            "oiou": oiou(inter[1:], union[1:]),  # foreground-pooled
            "miou": miou(conf),
        }
    # depth
    accum = {}
    for i in range(len(dataset)):
        raw = run_image(i)[0]
        pred = np.clip(np.exp(raw.astype(np.float64)), 1e-3, cfg.depth_loss.max_depth)
        gt = dataset.labels[i]
        sample = depth_metrics(pred, gt, gt > 0)
        for k, v in sample.items():
            accum.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in accum.items()}
