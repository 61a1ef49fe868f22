"""Training-loop contracts on a micro configuration: freeze/LR policy,
checkpoint round trips, resume determinism, the no-noise audit, CLI."""

import json
import os

import numpy as np
import pytest

from diffperc.checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from diffperc.config import config_from_dict, config_to_dict, load_config, save_config
from diffperc.errors import ConfigError
from diffperc.rng import Rng
from diffperc.train import (
    params_fingerprint,
    pretrain_codec,
    pretrain_toy,
    run_ablation,
    train_perception,
)

from conftest import micro_run_config


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """Codec + toy pretraining shared by the harness tests."""
    root = tmp_path_factory.mktemp("staged")
    cfg = micro_run_config(total_iters=8)
    pretrain_codec(cfg, root / "codec")
    toy_cfg = micro_run_config(total_iters=10)
    pretrain_toy(toy_cfg, str(root / "codec" / "checkpoint.bin"), root / "toy")
    return root, cfg


class TestConfig:
    def test_json_round_trip(self, tmp_path, micro_cfg):
        path = tmp_path / "cfg.json"
        save_config(micro_cfg, path)
        loaded = load_config(path)
        assert config_to_dict(loaded) == config_to_dict(micro_cfg)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"task": "semseg", "bogus": 1})

    def test_bad_task_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"task": "detection"})

    def test_backbone_multiplier_default(self, micro_cfg):
        assert micro_cfg.backbone_lr_multiplier == 0.1


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = Rng(1)
        tensors = {
            "unet.w": rng.normal((3, 4, 2, 2)),
            "head.b": rng.normal((7,)),
            "steps": np.arange(5, dtype=np.int64),
        }
        flags = {"unet.w": {"frozen": False, "lr_group": "backbone_0.1x"}}
        bundle = CheckpointBundle(tensors=dict(tensors), flags=flags,
                                  config={"task": "semseg"}, rng={"data": Rng(2).state()},
                                  step=42)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, bundle)
        loaded = load_checkpoint(path)
        assert loaded.step == 42 and loaded.version == 1
        assert loaded.flags == flags
        assert loaded.config == {"task": "semseg"}
        for name, arr in tensors.items():
            assert loaded.tensors[name].dtype == arr.dtype
            assert np.array_equal(loaded.tensors[name], arr)
        # same bytes when re-saved
        path2 = tmp_path / "ckpt2.bin"
        save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT" + b"\0" * 16)
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_namespace_filter(self):
        bundle = CheckpointBundle(tensors={"codec.a": np.zeros(1), "unet.b": np.zeros(1)})
        assert set(bundle.namespace("codec.")) == {"codec.a"}


class TestPretraining:
    def test_codec_stage_outputs(self, staged):
        root, _ = staged
        assert (root / "codec" / "checkpoint.bin").exists()
        assert (root / "codec" / "metrics.csv").exists()
        summary = json.loads((root / "codec" / "summary.json").read_text())
        assert summary["val_recon_mse"] > 0

    def test_toy_stage_trains_text_but_not_codec(self, staged):
        root, _ = staged
        codec_bundle = load_checkpoint(str(root / "codec" / "checkpoint.bin"))
        toy_bundle = load_checkpoint(str(root / "toy" / "checkpoint.bin"))
        for name, arr in codec_bundle.namespace("codec.").items():
            assert np.array_equal(toy_bundle.tensors[name], arr), name

        # text encoder must have moved from its seed init
        from diffperc.data import gen_shapes_semseg
        from diffperc.pipeline import PerceptionModel

        cfg = micro_run_config(total_iters=10)
        ds = gen_shapes_semseg(**{k: v for k, v in cfg.dataset.items() if k != "name"})
        fresh = PerceptionModel(cfg, ds.class_names, cfg.seed)
        init_fp = params_fingerprint(fresh.text_encoder.named_parameters("text."))
        changed = any(
            toy_bundle.tensors[name].tobytes() != init_fp[name] for name in init_fp
        )
        assert changed

    def test_toy_missing_codec_rejected(self, tmp_path, micro_cfg):
        empty = CheckpointBundle(tensors={"unet.x": np.zeros(1)})
        path = tmp_path / "empty.bin"
        save_checkpoint(path, empty)
        with pytest.raises(ConfigError):
            pretrain_toy(micro_cfg, str(path), tmp_path / "out")

    def test_toy_resume_identical_next_loss(self, tmp_path):
        cfg = micro_run_config(total_iters=6)
        codec_dir = tmp_path / "codec"
        pretrain_codec(micro_run_config(total_iters=4), codec_dir)
        codec_ckpt = str(codec_dir / "checkpoint.bin")

        # uninterrupted run to 6 iters
        full = pretrain_toy(cfg, codec_ckpt, tmp_path / "full")
        # interrupt at 4, then resume for the remaining 2
        pretrain_toy(cfg, codec_ckpt, tmp_path / "part", stop_after=4)
        resume_bundle = load_checkpoint(str(tmp_path / "part" / "checkpoint.bin"))
        assert resume_bundle.step == 4
        resumed = pretrain_toy(cfg, codec_ckpt, tmp_path / "resumed",
                               resume=resume_bundle)
        assert resumed["losses"][0] == full["losses"][4]
        assert resumed["losses"][1] == full["losses"][5]


class TestPerceptionTraining:
    def test_freeze_lr_and_noise_audits(self, staged, tmp_path):
        root, _ = staged
        cfg = micro_run_config(total_iters=4, eval_interval=2)
        init = str(root / "toy" / "checkpoint.bin")
        init_bundle = load_checkpoint(init)
        summary, log = train_perception(cfg, init, tmp_path / "run")
        assert summary["frozen_parameters_unchanged"] is True
        assert summary["noise_draws_on_perception_path"] == 0
        base = {s: v for _, s, m, v in log.rows if m == "lr_base"}
        backbone = {s: v for _, s, m, v in log.rows if m == "lr_backbone"}
        assert base and set(base) == set(backbone)
        for step, lr in base.items():
            assert backbone[step] == pytest.approx(0.1 * lr, rel=1e-9)
        assert "miou" in summary["final"]

        # trainable groups moved: backbone drifted from init, adapter from seed init
        out_bundle = load_checkpoint(str(tmp_path / "run" / "checkpoint.bin"))
        unet_moved = any(
            not np.array_equal(out_bundle.tensors[k], init_bundle.tensors[k])
            for k in init_bundle.namespace("unet.")
        )
        assert unet_moved
        adapter_keys = [k for k in out_bundle.tensors if k.startswith("adapter.")]
        assert adapter_keys
        assert out_bundle.flags["adapter.gamma"] == {"frozen": False, "lr_group": "base"}
        from diffperc.data import dataset_from_spec
        from diffperc.pipeline import PerceptionModel

        fresh = PerceptionModel(cfg, dataset_from_spec(cfg.dataset).class_names, cfg.seed)
        fresh_fp = params_fingerprint(fresh.adapter.named_parameters("adapter."))
        assert any(
            out_bundle.tensors[k].tobytes() != fresh_fp[k] for k in adapter_keys
        ), "adapter parameters did not train"

    def test_optimizer_partition_complete(self, staged, tmp_path):
        root, _ = staged
        cfg = micro_run_config(total_iters=2, eval_interval=2)
        from diffperc.pipeline import PerceptionModel
        from diffperc.train import build_perception_model

        bundle = load_checkpoint(str(root / "toy" / "checkpoint.bin"))
        from diffperc.data import dataset_from_spec

        ds = dataset_from_spec(cfg.dataset)
        model = build_perception_model(cfg, bundle, ds.class_names)
        roles = model.role_map()
        names = {n for n, _ in model.named_parameters()}
        assert names == set(roles)
        for name, p in model.named_parameters():
            frozen, group = roles[name]
            assert frozen == (not p.requires_grad)
            if frozen:
                assert group is None
            else:
                assert group in ("base", "backbone_0.1x")

    def test_deterministic_metrics_csv(self, staged, tmp_path):
        root, _ = staged
        cfg = micro_run_config(total_iters=4, eval_interval=2)
        train_perception(cfg, str(root / "toy" / "checkpoint.bin"), tmp_path / "a",
                         deterministic=True)
        train_perception(cfg, str(root / "toy" / "checkpoint.bin"), tmp_path / "b",
                         deterministic=True)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_checkpoint_reload_reproduces_eval(self, staged, tmp_path):
        root, _ = staged
        cfg = micro_run_config(total_iters=2, eval_interval=2)
        summary, _ = train_perception(cfg, str(root / "toy" / "checkpoint.bin"),
                                      tmp_path / "run")
        from diffperc.train import evaluate_checkpoint

        scores = evaluate_checkpoint(summary["checkpoint"], tmp_path / "eval")
        for metric, value in summary["final"].items():
            assert scores[metric] == value

    def test_task_dataset_mismatch_rejected(self, staged, tmp_path):
        root, _ = staged
        cfg = micro_run_config(total_iters=2, task="refseg")  # dataset stays semseg
        with pytest.raises(ConfigError):
            train_perception(cfg, str(root / "toy" / "checkpoint.bin"), tmp_path / "x")

    def test_vocab_file_branch(self, staged, tmp_path):
        # an init bundle without embedded tokens falls back to cfg.vocab_path
        root, _ = staged
        bundle = load_checkpoint(str(root / "toy" / "checkpoint.bin"))
        tokens = bundle.config.pop("vocab_tokens")
        vocab_file = tmp_path / "vocab.txt"
        vocab_file.write_text("\n".join(tokens) + "\n")

        from diffperc.data import dataset_from_spec
        from diffperc.train import build_perception_model

        cfg = micro_run_config(total_iters=2, vocab_path=str(vocab_file))
        ds = dataset_from_spec(cfg.dataset)
        model = build_perception_model(cfg, bundle, ds.class_names)
        assert model.text_encoder.vocab.tokens == tokens


class TestAblation:
    def test_single_row_matches_direct_run(self, staged, tmp_path):
        root, _ = staged
        cfg = micro_run_config(total_iters=4, eval_interval=2)
        init = str(root / "toy" / "checkpoint.bin")
        summary, results = run_ablation(cfg, init, tmp_path / "ab",
                                        seeds=(0,), early=2, late=4, rows=[3])
        assert len(results) == 1

        from dataclasses import replace

        from diffperc.guidance import GuidanceConfig
        from diffperc.train import ablation_config

        direct_cfg = ablation_config(cfg, {"row": 3, "use_text_prompt": True,
                                           "use_adapter": True, "source": "none"},
                                     seed=0, early=2, late=4)
        _, log = train_perception(direct_cfg, init, tmp_path / "direct")
        assert results[0]["miou_early"] == log.value_at(2, "miou")
        assert results[0]["miou_late"] == log.value_at(4, "miou")

    def test_grid_has_seven_rows(self):
        from diffperc.train import ABLATION_GRID

        assert len(ABLATION_GRID) == 7
        assert [r["source"] for r in ABLATION_GRID] == [
            "none", "none", "none", "mid", "down", "up", "up_down"
        ]

    def test_non_semseg_rejected(self, staged, tmp_path):
        root, _ = staged
        cfg = micro_run_config(total_iters=2, task="depth",
                               dataset={"name": "depth", "n": 8, "side": 64, "seed": 0})
        with pytest.raises(ConfigError):
            run_ablation(cfg, str(root / "toy" / "checkpoint.bin"), tmp_path / "nope")


class TestCli:
    def test_full_command_chain(self, tmp_path):
        from diffperc.cli import main

        cfg = micro_run_config(total_iters=3, eval_interval=3)
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg, cfg_path)

        assert main(["pretrain-codec", "--config", str(cfg_path),
                     "--out", str(tmp_path / "codec")]) == 0
        assert main(["pretrain-toy", "--config", str(cfg_path),
                     "--init", str(tmp_path / "codec" / "checkpoint.bin"),
                     "--out", str(tmp_path / "toy")]) == 0
        assert main(["train", "--config", str(cfg_path), "--deterministic",
                     "--init", str(tmp_path / "toy" / "checkpoint.bin"),
                     "--out", str(tmp_path / "train")]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / "train" / "checkpoint.bin"),
                     "--out", str(tmp_path / "eval")]) == 0
        assert main(["dump-features",
                     "--checkpoint", str(tmp_path / "train" / "checkpoint.bin"),
                     "--out", str(tmp_path / "features")]) == 0
        assert main(["plot-csv", "--csv", str(tmp_path / "train" / "metrics.csv"),
                     "--metric", "loss", "--out", str(tmp_path / "loss.svg")]) == 0

        assert (tmp_path / "features" / "features.npz").exists()
        assert (tmp_path / "features" / "input.pgm").exists()
        svg = (tmp_path / "loss.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg

    def test_seed_override(self, tmp_path):
        from diffperc.cli import main

        cfg_path = tmp_path / "cfg.json"
        save_config(micro_run_config(total_iters=2), cfg_path)
        assert main(["pretrain-codec", "--config", str(cfg_path), "--seed", "9",
                     "--out", str(tmp_path / "c9")]) == 0
        summary = json.loads((tmp_path / "c9" / "summary.json").read_text())
        assert summary["iters"] == 2
