"""Perception pipeline assembly: conditioning modes, task forwards, and
micro end-to-end runs for the refseg and depth tasks."""

import numpy as np
import pytest

from diffperc import tensor as T
from diffperc.data import gen_depth, gen_refseg, gen_shapes_semseg
from diffperc.errors import ConfigError
from diffperc.pipeline import PerceptionModel, evaluate, task_loss
from diffperc.tensor import Tensor

from conftest import micro_run_config


@pytest.fixture(scope="module")
def semseg_setup():
    cfg = micro_run_config()
    ds = gen_shapes_semseg(8, classes=6, side=64, seed=3)
    return cfg, ds, PerceptionModel(cfg, ds.class_names, seed=0)


class TestConditioning:
    def test_semseg_uses_class_prompt_rows(self, semseg_setup):
        cfg, ds, model = semseg_setup
        cond = model.conditioning()
        assert cond.features.shape == (6, cfg.model.text_width)
        assert cond.prompts.entries[1] == "a photo of a circle"

    def test_cache_reused_across_calls(self, semseg_setup):
        _, _, model = semseg_setup
        a = model.conditioning().features.data
        b = model.conditioning().features.data
        assert np.array_equal(a, b)
        assert len(model._cond_cache) == 6

    def test_per_sample_prompts_refseg(self):
        cfg = micro_run_config(task="refseg",
                               dataset={"name": "refseg", "n": 8, "side": 64, "seed": 1})
        ds = gen_refseg(8, side=64, seed=1)
        model = PerceptionModel(cfg, ds.class_names, seed=0)
        cond = model.conditioning(ds.prompts[:4])
        assert cond.features.shape == (4, 1, cfg.model.text_width)
        # expressions pass through untouched
        assert cond.prompts.entries == ds.prompts[:4]

    def test_depth_prompts_use_scene_template(self):
        cfg = micro_run_config(task="depth",
                               dataset={"name": "depth", "n": 8, "side": 64, "seed": 1})
        ds = gen_depth(8, side=64, seed=1)
        model = PerceptionModel(cfg, ds.class_names, seed=0)
        cond = model.conditioning(ds.prompts[:2])
        assert cond.prompts.entries[0] == f"a photo of a {ds.prompts[0]}"

    def test_null_prompt_row_when_disabled(self):
        from dataclasses import replace

        base = micro_run_config()
        cfg = replace(base, prompts=replace(base.prompts, use_text_prompt=False))
        ds = gen_shapes_semseg(4, classes=6, side=64, seed=3)
        model = PerceptionModel(cfg, ds.class_names, seed=0)
        cond = model.conditioning()
        assert cond.features.shape == (1, cfg.model.text_width)
        assert model.null_prompt is not None
        assert cond.features is not model.null_prompt or model.adapter is None

    def test_per_sample_task_requires_prompts(self):
        cfg = micro_run_config(task="refseg",
                               dataset={"name": "refseg", "n": 8, "side": 64, "seed": 1})
        model = PerceptionModel(cfg, ["object"], seed=0)
        with pytest.raises(ConfigError):
            model.conditioning(None)

    def test_component_streams_isolate_flags(self):
        # toggling the adapter must not change head/unet initialization
        from dataclasses import replace

        base = micro_run_config()
        ds = gen_shapes_semseg(4, classes=6, side=64, seed=3)
        with_adapter = PerceptionModel(base, ds.class_names, seed=5)
        without = PerceptionModel(
            replace(base, prompts=replace(base.prompts, use_adapter=False)),
            ds.class_names, seed=5,
        )
        for (na, pa), (nb, pb) in zip(with_adapter.unet.named_parameters("unet."),
                                      without.unet.named_parameters("unet.")):
            assert na == nb and np.array_equal(pa.data, pb.data)
        for (na, pa), (nb, pb) in zip(with_adapter.head.named_parameters("head."),
                                      without.head.named_parameters("head.")):
            assert na == nb and np.array_equal(pa.data, pb.data)


class TestForward:
    def test_semseg_logit_shape(self, semseg_setup):
        cfg, ds, model = semseg_setup
        with T.no_grad():
            logits = model.forward(Tensor(ds.images[:2]))
        assert logits.shape == (2, 6, 64, 64)

    def test_loss_backward_reaches_unet_not_codec(self, semseg_setup):
        from diffperc.data import TaskBatch

        cfg, ds, model = semseg_setup
        model.freeze_pretrained()
        logits = model.forward(Tensor(ds.images[:2]))
        batch = TaskBatch(images=None, labels=ds.labels[:2], task="semseg")
        loss = task_loss(model, logits, batch)
        model.zero_grad()
        loss.backward()
        assert any(p.grad is not None for _, p in model.unet.named_parameters("unet."))
        assert all(p.grad is None for _, p in model.codec.named_parameters("codec."))
        assert any(p.grad is not None for _, p in model.head.named_parameters("head."))

    def test_guidance_changes_head_width(self):
        from dataclasses import replace

        from diffperc.guidance import GuidanceConfig

        base = micro_run_config()
        ds = gen_shapes_semseg(4, classes=6, side=64, seed=3)
        fused = PerceptionModel(base, ds.class_names, seed=0)
        plain = PerceptionModel(replace(base, guidance=GuidanceConfig(source="none")),
                                ds.class_names, seed=0)
        # fused levels gain one channel per class prompt
        assert fused.head.in_channels[1] == plain.head.in_channels[1] + 6
        assert fused.head.in_channels[0] == plain.head.in_channels[0]


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    from diffperc.train import pretrain_codec, pretrain_toy

    root = tmp_path_factory.mktemp("e2e")
    pretrain_codec(micro_run_config(total_iters=6), root / "codec")
    pretrain_toy(micro_run_config(total_iters=6),
                 str(root / "codec" / "checkpoint.bin"), root / "toy")
    return root


class TestMicroEndToEnd:
    def test_refseg_micro_training(self, staged, tmp_path):
        from diffperc.train import train_perception

        cfg = micro_run_config(
            task="refseg",
            dataset={"name": "refseg", "n": 8, "side": 64, "seed": 2},
            total_iters=3, eval_interval=3,
        )
        summary, _ = train_perception(cfg, str(staged / "toy" / "checkpoint.bin"),
                                      tmp_path / "ref")
        assert "oiou" in summary["final"]
        assert 0.0 <= summary["final"]["oiou"] <= 1.0
        assert summary["noise_draws_on_perception_path"] == 0

    def test_depth_micro_training_with_flip_eval(self, staged, tmp_path):
        from dataclasses import replace

        from diffperc.train import train_perception

        base = micro_run_config(
            task="depth",
            dataset={"name": "depth", "n": 8, "side": 64, "seed": 2},
            total_iters=3, eval_interval=3,
        )
        cfg = replace(base, eval=replace(base.eval, use_flip=True))
        summary, _ = train_perception(cfg, str(staged / "toy" / "checkpoint.bin"),
                                      tmp_path / "depth")
        final = summary["final"]
        for key in ("rmse", "rel", "log10", "delta1", "delta2", "delta3"):
            assert key in final
        assert final["delta1"] <= final["delta2"] <= final["delta3"]
        assert summary["frozen_parameters_unchanged"] is True


def test_evaluate_refseg_counts_foreground_union():
    cfg = micro_run_config(task="refseg",
                           dataset={"name": "refseg", "n": 4, "side": 64, "seed": 5})
    ds = gen_refseg(4, side=64, seed=5)
    model = PerceptionModel(cfg, ds.class_names, seed=1)
    scores = evaluate(model, ds)
    assert 0.0 <= scores["oiou"] <= 1.0
