import unittest

import numpy as np
from mock import patch

import cdlf.diffusion
from cdlf.context import ContextVector
from cdlf.diffusion import (
    ForecastDistribution,
    NoiseSchedule,
    assemble_window,
    build_schedule,
    forward_noise,
    posterior_params,
    reverse_mean,
    rollout,
    sample_next,
)
from cdlf.errors import ConfigurationError, DimensionError, StepOutOfRangeError
from cdlf.numerics import RngStream
from test.unit.helpers import random_params, tiny_config, tiny_model_config, zero_params


def context_for(model_config, seed=0):
    rng = RngStream(seed)
    c = rng.normal(model_config.context_dim)
    return ContextVector(c[: model_config.ref_hidden], c[model_config.ref_hidden :], c, rng.normal(model_config.latent_dim))


class NoiseScheduleTest(unittest.TestCase):
    def test_tables(self):
        sched = build_schedule(4, 0.1, 0.4)
        self.assertEqual(sched.steps, 4)
        np.testing.assert_allclose(sched.betas, [0.0, 0.1, 0.2, 0.3, 0.4])
        self.assertEqual(sched.alpha_bars[0], 1.0)
        self.assertAlmostEqual(sched.alpha_bars[2], 0.9 * 0.8)
        self.assertEqual(sched.sigma2[0], 0.0)
        self.assertEqual(sched.sigma2[1], 0.0)
        self.assertAlmostEqual(sched.sigma2[2], (1 - 0.9) / (1 - 0.72) * 0.2)

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            build_schedule(0, 0.1, 0.2)
        with self.assertRaises(ConfigurationError):
            build_schedule(3, 0.3, 0.2)
        with self.assertRaises(ConfigurationError):
            NoiseSchedule([0.5, 1.0])

    def test_step_range(self):
        sched = build_schedule(3, 0.1, 0.2)
        with self.assertRaises(StepOutOfRangeError):
            posterior_params(0.0, 0.0, 0, sched)
        with self.assertRaises(StepOutOfRangeError):
            forward_noise(0.0, 4, 0.0, sched)
        self.assertEqual(forward_noise(1.5, 0, 9.0, sched), 1.5)


class ForwardAndPosteriorTest(unittest.TestCase):
    def setUp(self):
        self.sched = build_schedule(10, 1e-3, 0.2)

    def test_forward_moments(self):
        rng = RngStream(21)
        x0 = np.array([0.7, -1.2])
        n = 6
        samples = forward_noise(x0, n, rng.normal((100000, 2)), self.sched)
        ab = self.sched.alpha_bars[n]
        np.testing.assert_allclose(samples.mean(axis=0), np.sqrt(ab) * x0, atol=0.01)
        np.testing.assert_allclose(samples.var(axis=0), 1 - ab, rtol=0.02)

    def test_posterior_mean_matches_noise_form(self):
        rng = RngStream(3)
        for _ in range(1000):
            n = int(rng.integers(1, 11))
            x0 = rng.normal(2)
            eps = rng.normal(2)
            xn = forward_noise(x0, n, eps, self.sched)
            mean, var = posterior_params(xn, x0, n, self.sched)
            np.testing.assert_allclose(mean, reverse_mean(xn, eps, n, self.sched), atol=1e-10)
            self.assertEqual(var, self.sched.sigma2[n])


class WindowTest(unittest.TestCase):
    def test_pads_short_history(self):
        window = assemble_window(np.array([[1.0], [2.0]]), np.array([9.0]), 4)
        np.testing.assert_array_equal(window[:, 0], [0.0, 1.0, 2.0, 9.0])

    def test_truncates_long_history(self):
        history = np.arange(6, dtype=float).reshape(-1, 1)
        window = assemble_window(history, np.array([9.0]), 3)
        np.testing.assert_array_equal(window[:, 0], [4.0, 5.0, 9.0])

    def test_batched(self):
        history = np.zeros((2, 1, 1))
        window = assemble_window(history, np.array([[1.0], [2.0]]), 2)
        self.assertEqual(window.shape, (2, 2, 1))


class SampleNextTest(unittest.TestCase):
    def test_single_step_zero_network_is_gaussian(self):
        cfg = tiny_model_config(tiny_config(diffusion_steps=1, clip_bound=1e6))
        sched = build_schedule(1, 0.1, 0.1)
        params = zero_params(cfg)
        rng = RngStream(0)
        streams = [rng.spawn(i) for i in range(20000)]
        h = np.zeros((20000, cfg.latent_dim))
        x = sample_next(h, np.zeros((20000, 0, 1)), params, sched, streams, cfg)
        # n = 1 applies the mean only: x = x^1 / sqrt(alpha_1)
        self.assertAlmostEqual(float(x.mean()), 0.0, delta=0.03)
        self.assertAlmostEqual(float(x.var()), 1.0 / 0.9, delta=0.04)

    def test_clipped(self):
        cfg = tiny_model_config(tiny_config(clip_bound=0.05))
        params = zero_params(cfg)
        params["score.out_b"] = np.array([100.0])
        sched = build_schedule(5, 0.01, 0.1)
        x = sample_next(np.zeros(cfg.latent_dim), np.zeros((0, 1)), params, sched, RngStream(1), cfg)
        self.assertTrue(np.all(np.abs(x) <= 0.05))


class RolloutTest(unittest.TestCase):
    def setUp(self):
        self.config = tiny_model_config()
        self.params = random_params(self.config, seed=2, scale=0.3)
        self.sched = build_schedule(5, 1e-3, 0.1)
        self.ctx = context_for(self.config)
        self.prefix = np.linspace(0.1, 0.5, 5).reshape(-1, 1)

    def _rollout(self, seed=0, workers=None, M=6, horizon=4):
        return rollout(
            self.ctx, self.prefix, 6, horizon, M, self.params, self.sched, RngStream(seed),
            self.config, workers=workers,
        )

    def test_shape_and_bounds(self):
        dist = self._rollout()
        self.assertIsInstance(dist, ForecastDistribution)
        self.assertEqual(dist.samples.shape, (6, 4, 1))
        self.assertEqual(dist.origin, 6)
        self.assertTrue(np.all(np.abs(dist.samples) <= self.config.clip_bound))

    def test_zero_horizon(self):
        dist = self._rollout(horizon=0)
        self.assertEqual(dist.samples.shape, (6, 0, 1))

    def test_negative_horizon(self):
        with self.assertRaises(ConfigurationError):
            self._rollout(horizon=-1)

    def test_prefix_must_match_origin(self):
        with self.assertRaises(DimensionError):
            rollout(
                self.ctx, self.prefix[:3], 6, 2, 2, self.params, self.sched, RngStream(0),
                self.config,
            )

    def test_seeded_and_independent_of_workers(self):
        a = self._rollout(seed=5)
        b = self._rollout(seed=5)
        c = self._rollout(seed=5, workers=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_allclose(a.samples, c.samples, rtol=0, atol=1e-12)
        self.assertFalse(np.array_equal(a.samples, self._rollout(seed=6).samples))

    def test_prefix_rolls_transition_once_per_observation(self):
        with patch("cdlf.diffusion.transition", wraps=cdlf.diffusion.transition) as mocked:
            self._rollout(horizon=1)
        self.assertEqual(mocked.call_count, 5)

    def test_rollout_advances_state_between_steps(self):
        with patch("cdlf.diffusion.transition", wraps=cdlf.diffusion.transition) as mocked:
            self._rollout(horizon=3)
        # 5 prefix updates, then 2 updates between the 3 sampled steps
        self.assertEqual(mocked.call_count, 7)


class ForecastDistributionTest(unittest.TestCase):
    def test_quantiles_and_inverse(self):
        class Doubler(object):
            def invert(self, values):
                return 2 * values

        samples = np.arange(10, dtype=float).reshape(10, 1, 1)
        dist = ForecastDistribution(3, samples, inverse=Doubler())
        self.assertEqual(dist.num_samples, 10)
        self.assertEqual(dist.horizon, 1)
        np.testing.assert_allclose(dist.quantiles([0.5])[0, 0, 0], 4.5)
        np.testing.assert_allclose(dist.raw_samples(), 2 * samples)
        self.assertEqual(dist.median_path().shape, (1, 1))

    def test_rejects_bad_samples(self):
        with self.assertRaises(DimensionError):
            ForecastDistribution(1, np.zeros((3, 2)))
