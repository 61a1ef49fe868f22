"""Noise schedule and diffusion objective, checked against a step-by-step
Markov-chain oracle and finite differences."""

import numpy as np
import pytest

from diffperc import tensor as T
from diffperc.diffusion import NoiseSchedule, add_noise, denoising_loss, linear_schedule
from diffperc.errors import ConfigError, DimensionError
from diffperc.nn import Conv2d
from diffperc.rng import Rng
from diffperc.tensor import Tensor, grad_check


class TestLinearSchedule:
    def test_single_step_no_noise(self):
        s = linear_schedule(1, 0.0, 0.0)
        assert np.allclose(s.alphas, [1.0])
        assert np.allclose(s.alpha_bars, [1.0])

    def test_default_thousand_step_tail(self):
        s = linear_schedule(1000, 1e-4, 2e-2)
        # cumulative product computed independently in log space
        betas = np.linspace(1e-4, 2e-2, 1000)
        expected_tail = np.exp(np.sum(np.log1p(-betas)))
        assert abs(s.alpha_bars[-1] - expected_tail) / expected_tail < 1e-9
        assert s.alpha_bars[-1] < 1e-4

    def test_alpha_bars_are_cumulative_products(self):
        s = linear_schedule(64, 1e-3, 5e-2)
        prod = 1.0
        for t in range(64):
            prod *= s.alphas[t]
            assert abs(s.alpha_bars[t] - prod) <= 1e-6 * abs(prod)

    def test_alpha_bars_non_increasing(self):
        for args in [(10, 0.0, 0.5), (100, 1e-4, 2e-2), (3, 0.3, 0.3)]:
            s = linear_schedule(*args)
            assert np.all(np.diff(s.alpha_bars) <= 0)

    @pytest.mark.parametrize("bad", [(0, 1e-4, 2e-2), (10, -0.1, 0.5), (10, 0.5, 0.2), (10, 0.1, 1.0)])
    def test_invalid_ranges_rejected(self, bad):
        with pytest.raises(ConfigError):
            linear_schedule(*bad)


class TestAddNoise:
    def setup_method(self):
        self.schedule = linear_schedule(50, 1e-3, 5e-2)
        self.z0 = Tensor(Rng(1).normal((1, 2, 2, 2)))

    def test_zero_noise_scales_signal(self):
        eps = Tensor(np.zeros_like(self.z0.data))
        t = 20
        out = add_noise(self.z0, t, eps, self.schedule)
        assert np.allclose(out.data, np.sqrt(self.schedule.alpha_bar(t)) * self.z0.data, rtol=1e-6)

    def test_full_signal_identity(self):
        s = NoiseSchedule(1, np.array([1.0]), np.array([1.0]))
        eps = Tensor(Rng(2).normal(self.z0.shape))
        out = add_noise(self.z0, 1, eps, s)
        assert np.allclose(out.data, self.z0.data, atol=1e-7)

    def test_t_zero_returns_input(self):
        eps = Tensor(Rng(2).normal(self.z0.shape))
        out = add_noise(self.z0, 0, eps, self.schedule)
        assert np.array_equal(out.data, self.z0.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            add_noise(self.z0, 1, Tensor(np.zeros((1, 2, 3, 3))), self.schedule)

    def test_linear_in_signal_and_noise(self):
        t = 10
        e1 = Tensor(Rng(3).normal(self.z0.shape))
        e2 = Tensor(Rng(4).normal(self.z0.shape))
        a = add_noise(self.z0, t, e1, self.schedule).data
        b = add_noise(self.z0, t, e2, self.schedule).data
        both = add_noise(
            T.mul(self.z0, 2.0), t, T.add(e1, e2), self.schedule
        ).data
        assert np.allclose(a + b, both, rtol=1e-5, atol=1e-6)


def chain_oracle(z0, t, schedule, n_draws, rng):
    """Iterate the per-step Markov transition from z0 up to timestep t."""
    z = np.broadcast_to(z0, (n_draws,) + z0.shape).astype(np.float64).copy()
    for s in range(1, t + 1):
        a = schedule.alphas[s - 1]
        z = np.sqrt(a) * z + np.sqrt(1.0 - a) * rng.standard_normal(z.shape)
    return z


@pytest.mark.parametrize("num_steps,t", [(5, 5), (50, 50), (50, 17)])
def test_closed_form_matches_iterated_chain(num_steps, t):
    schedule = linear_schedule(num_steps, 1e-2, 2e-1)
    z0 = Rng(11).normal((2, 2))
    n = 100_000

    gen = np.random.default_rng(123)
    chain = chain_oracle(z0, t, schedule, n, gen)

    eps = gen.standard_normal((n,) + z0.shape)
    abar = schedule.alpha_bar(t)
    closed = np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps

    sigma = np.sqrt(1.0 - abar)
    assert np.all(np.abs(chain.mean(axis=0) - closed.mean(axis=0)) < 0.01 * max(sigma, 0.1))
    assert np.all(np.abs(chain.std(axis=0) / closed.std(axis=0) - 1.0) < 0.01)


class TestDenoisingLoss:
    def setup_method(self):
        self.schedule = linear_schedule(10, 1e-2, 2e-1)
        self.rng = Rng(21)

    def test_perfect_predictor_gives_zero(self):
        z0 = Tensor(self.rng.normal((1, 2, 2, 2)))
        eps = Tensor(self.rng.normal((1, 2, 2, 2)))
        loss = denoising_loss(lambda zt, t, c: eps, z0, None, 5, eps, self.schedule)
        assert loss.item() == 0.0

    def test_zero_predictor_on_unit_noise(self):
        z0 = Tensor(np.zeros((1, 2, 2, 2)))
        eps = Tensor(np.ones((1, 2, 2, 2)))
        loss = denoising_loss(
            lambda zt, t, c: Tensor(np.zeros_like(zt.data)), z0, None, 5, eps, self.schedule
        )
        assert abs(loss.item() - 1.0) < 1e-7

    def test_loss_nonnegative_random_models(self):
        for seed in range(5):
            r = Rng(seed)
            z0 = Tensor(r.normal((1, 2, 4, 4)))
            eps = Tensor(r.normal((1, 2, 4, 4)))
            bias = Tensor(r.normal((1, 2, 4, 4)))
            loss = denoising_loss(
                lambda zt, t, c: T.add(zt, bias), z0, None, 3, eps, self.schedule
            )
            assert loss.item() >= 0.0

    def test_gradient_through_two_layer_stub(self):
        # two-conv noise-prediction stub; check the loss gradient w.r.t. a
        # parameter tensor against finite differences (seed chosen so no
        # gradient coordinate sits below the float32 difference floor)
        rng = Rng(59)
        z0 = Tensor(rng.normal((1, 2, 4, 4)))
        eps = Tensor(rng.normal((1, 2, 4, 4)))
        conv2 = Conv2d(3, 2, 3, rng)

        def f(w1):
            def stub(zt, t, cond):
                h = T.silu(T.conv2d(zt, w1, None, stride=1, padding=1))
                return conv2(h)

            return denoising_loss(stub, z0, None, 4, eps, self.schedule)

        w0 = Tensor(rng.normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        assert grad_check(f, w0, eps=1e-2) < 1e-2
