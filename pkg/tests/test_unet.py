"""Backbone shape contracts, attention-map normalization, determinism."""

import numpy as np
import pytest

from diffperc import tensor as T
from diffperc.errors import ConfigError, DimensionError
from diffperc.rng import Rng
from diffperc.tensor import Tensor, grad_check
from diffperc.text import ConditioningFeatures
from diffperc.unet import CrossAttnBlock, DenoisingUNet, UNetConfig, timestep_embed

TINY = UNetConfig(base_channels=8, channel_multipliers=(1, 1, 2, 2), attn_heads=2,
                  latent_channels=2, cond_width=16, time_width=8, norm_groups=4)


def make_unet(cfg=TINY, seed=0):
    return DenoisingUNet(cfg, Rng(seed))


def make_cond(num_prompts, width=16, seed=1):
    return ConditioningFeatures(Tensor(Rng(seed).normal((num_prompts, width))))


class TestTimestepEmbed:
    def test_zero_timestep(self):
        emb = timestep_embed(0, 8).data[0]
        assert np.allclose(emb[:4], 0.0)
        assert np.allclose(emb[4:], 1.0)

    def test_distinct_over_schedule_range(self):
        seen = {tuple(timestep_embed(t, 16).data[0].tolist()) for t in range(0, 1001)}
        assert len(seen) == 1001

    def test_finite_at_max(self):
        emb = timestep_embed(1000, 64).data
        assert np.all(np.isfinite(emb))
        assert np.linalg.norm(emb) < 1e3

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            timestep_embed(-1, 8)


class TestCrossAttention:
    def test_single_prompt_map_all_ones(self):
        block = CrossAttnBlock(8, 16, 2, 4, Rng(2))
        x = Tensor(Rng(3).normal((2, 8, 4, 4)))
        _, weights = block(x, make_cond(1))
        assert np.array_equal(weights.data, np.ones((2, 1, 4, 4), dtype=np.float32))

    def test_map_normalized_over_prompt_axis(self):
        block = CrossAttnBlock(8, 16, 2, 4, Rng(4))
        x = Tensor(Rng(5).normal((2, 8, 4, 4)))
        _, weights = block(x, make_cond(5))
        assert weights.shape == (2, 5, 4, 4)
        assert np.all(weights.data >= 0) and np.all(weights.data <= 1)
        assert np.allclose(weights.data.sum(axis=1), 1.0, atol=1e-5)

    def test_identical_rows_give_uniform_map(self):
        block = CrossAttnBlock(8, 16, 2, 4, Rng(6))
        row = Rng(7).normal((1, 16))
        cond = ConditioningFeatures(Tensor(np.repeat(row, 4, axis=0)))
        x = Tensor(Rng(8).normal((1, 8, 4, 4)))
        _, weights = block(x, cond)
        assert np.allclose(weights.data, 0.25, atol=1e-6)

    def test_width_mismatch(self):
        block = CrossAttnBlock(8, 16, 2, 4, Rng(9))
        with pytest.raises(DimensionError):
            block(Tensor(np.zeros((1, 8, 4, 4))), make_cond(2, width=12))

    def test_per_sample_conditioning(self):
        block = CrossAttnBlock(8, 16, 2, 4, Rng(10))
        x = Tensor(Rng(11).normal((3, 8, 4, 4)))
        cond = ConditioningFeatures(Tensor(Rng(12).normal((3, 1, 16))))
        out, weights = block(x, cond)
        assert out.shape == x.shape
        assert weights.shape == (3, 1, 4, 4)

    def test_gradcheck_through_attention(self):
        block = CrossAttnBlock(4, 8, 2, 2, Rng(13))
        cond0 = Tensor(Rng(14).normal((3, 8)), requires_grad=True)
        x = Tensor(Rng(15).normal((1, 4, 2, 2)))

        with T.no_grad():
            base_out, base_w = block(x, ConditioningFeatures(Tensor(cond0.data.copy())))
            base = np.concatenate([base_out.data.ravel(), base_w.data.ravel()])

        def f(c):
            out, weights = block(x, ConditioningFeatures(c))
            flat = T.concat([T.reshape(out, (-1,)), T.reshape(weights, (-1,))], axis=0)
            probe = Tensor(Rng(99).normal(flat.shape))
            return T.tsum(T.mul(T.sub(flat, Tensor(base)), probe))

        assert grad_check(f, cond0, eps=3e-3) < 1e-2


class TestBackbone:
    def test_feature_pyramid_shapes(self):
        unet = make_unet()
        z = Tensor(Rng(20).normal((2, 2, 8, 8)))
        out = unet(z, 0, make_cond(5))
        sides = [f.shape[2] for f in out.features]
        assert sides == [1, 2, 4, 8]
        assert out.features[-1].shape[2] == z.shape[2]
        for a, b in zip(out.features, out.features[1:]):
            assert b.shape[2] == 2 * a.shape[2]
        assert out.eps.shape == z.shape

    def test_attention_records_cover_all_locations(self):
        unet = make_unet()
        out = unet(Tensor(Rng(21).normal((1, 2, 8, 8))), 0, make_cond(3))
        locations = {(r.location, r.level) for r in out.attn_maps}
        assert {("down", 4), ("down", 3), ("down", 2), ("down", 1)} <= locations
        assert {("up", 1), ("up", 2), ("up", 3), ("up", 4)} <= locations
        assert ("mid", 1) in locations
        assert len(out.attn_maps) == 9

    def test_attention_map_shapes_follow_level(self):
        unet = make_unet()
        out = unet(Tensor(Rng(22).normal((1, 2, 8, 8))), 0, make_cond(5))
        for rec in out.attn_maps:
            side = 8 // 2 ** (4 - rec.level)
            assert rec.weights.shape == (1, 5, side, side)

    def test_every_map_normalized(self):
        unet = make_unet()
        out = unet(Tensor(Rng(23).normal((2, 2, 8, 8))), 0, make_cond(4))
        for rec in out.attn_maps:
            sums = rec.weights.data.sum(axis=1)
            assert np.allclose(sums, 1.0, atol=1e-5), rec.location

    def test_deterministic_at_t0(self):
        unet = make_unet()
        z = Tensor(Rng(24).normal((1, 2, 8, 8)))
        cond = make_cond(3)
        with T.no_grad():
            a = unet(z, 0, cond)
            b = unet(z, 0, cond)
        assert np.array_equal(a.eps.data, b.eps.data)
        for fa, fb in zip(a.features, b.features):
            assert np.array_equal(fa.data, fb.data)

    def test_conditioning_sensitivity(self):
        # changing any single prompt row changes at least one attention map
        unet = make_unet(seed=5)
        z = Tensor(Rng(25).normal((1, 2, 8, 8)))
        base_cond = Rng(26).normal((3, 16))
        with T.no_grad():
            base = unet(z, 0, ConditioningFeatures(Tensor(base_cond)))
        for row in range(3):
            bumped = base_cond.copy()
            bumped[row] += 1.0
            with T.no_grad():
                out = unet(z, 0, ConditioningFeatures(Tensor(bumped)))
            changed = any(
                not np.allclose(a.weights.data, b.weights.data, atol=1e-7)
                for a, b in zip(base.attn_maps, out.attn_maps)
            )
            assert changed, f"row {row} had no effect on any attention map"

    def test_empty_conditioning_rejected(self):
        unet = make_unet()
        with pytest.raises(ConfigError):
            unet(Tensor(np.zeros((1, 2, 8, 8))), 0, None)

    def test_channel_mismatch_rejected(self):
        unet = make_unet()
        with pytest.raises(DimensionError):
            unet(Tensor(np.zeros((1, 3, 8, 8))), 0, make_cond(2))

    def test_timestep_changes_eps(self):
        unet = make_unet()
        z = Tensor(Rng(27).normal((1, 2, 8, 8)))
        cond = make_cond(2)
        with T.no_grad():
            e0 = unet(z, 0, cond).eps.data
            e9 = unet(z, 9, cond).eps.data
        assert not np.allclose(e0, e9)

    def test_config_requires_four_levels(self):
        with pytest.raises(ConfigError):
            UNetConfig(channel_multipliers=(1, 2, 4))

    def test_end_to_end_gradient(self):
        unet = make_unet(seed=3)
        z = Tensor(Rng(103).normal((1, 2, 8, 8)))
        cond0 = Tensor(Rng(200).normal((2, 16)), requires_grad=True)

        with T.no_grad():
            base = unet(z, 0, ConditioningFeatures(Tensor(cond0.data.copy()))).eps.data.copy()

        def f(c):
            out = unet(z, 0, ConditioningFeatures(c))
            return T.tsum(T.sub(out.eps, Tensor(base)))

        assert grad_check(f, cond0, eps=3e-3) < 1e-2
