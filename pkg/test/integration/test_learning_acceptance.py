import logging
import time
import unittest

import numpy as np

from cdlf.diffusion import build_schedule
from cdlf.numerics import RngStream
from cdlf.panel import PanelDataset, SeriesRecord, apply_normalization, generate_synthetic
from cdlf.protocol import forecast_window, run_protocol
from cdlf.training import leave_focal_out_references, train
from test.integration.utils import acceptance_config, slow

logger = logging.getLogger("cdlf.test.acceptance")

SEEDS = [1, 2, 3, 4, 5]
PREFIX = 6


def synthetic_panel(config):
    dataset = generate_synthetic(
        config.synthetic_series,
        config.synthetic_length,
        config.seed,
        family=config.synthetic_family,
        noise=config.synthetic_noise,
    )
    return apply_normalization(dataset, config.normalization)


def mcrps_from(scores, first_time):
    """Mean CRPS over forecast times ``>= first_time`` of one-window-per-series runs."""
    values = [s.crps[first_time - s.origin :] for s in scores]
    return float(np.concatenate(values).mean())


@slow
class LearningSignalTest(unittest.TestCase):
    def run_seed(self, seed):
        config = acceptance_config(seed=seed, horizon=None, t0=PREFIX)
        dataset = synthetic_panel(config)
        start = time.time()
        post = run_protocol(dataset, config)
        pre = run_protocol(
            dataset,
            config.replace(mode="pre-launch"),
            params=post.params,
            encoder=post.encoder,
        )
        logger.info(
            "seed %s: %.1fs, post %.4g (clim %.4g), pre %.4g (clim %.4g)",
            seed,
            time.time() - start,
            post.report.mcrps,
            post.climatology_mcrps,
            pre.report.mcrps,
            pre.climatology_mcrps,
        )
        return {
            "post_beats_climatology": post.report.mcrps < post.climatology_mcrps,
            "pre_beats_climatology": pre.report.mcrps < pre.climatology_mcrps,
            # same forecast times on both sides
            "prefix_helps": post.report.mcrps <= mcrps_from(pre.scores, PREFIX),
        }

    def test_beats_climatology_and_prefix_helps(self):
        outcomes = [self.run_seed(seed) for seed in SEEDS]
        for check in ("post_beats_climatology", "pre_beats_climatology", "prefix_helps"):
            passed = sum(o[check] for o in outcomes)
            self.assertGreaterEqual(passed, 4, "{} held for {} of 5 seeds".format(check, passed))


@slow
class ConstantPanelTest(unittest.TestCase):
    def test_learns_constant_zero(self):
        records = [
            SeriesRecord("z{}".format(i), np.arange(1, 13), np.zeros(12), {"kind": "ab"[i % 2]})
            for i in range(10)
        ]
        dataset = PanelDataset(records)
        config = acceptance_config(seed=0, max_steps=3000, normalization="none")
        params, _ = train(dataset, config)

        record = dataset.get("z0")
        selected = leave_focal_out_references(dataset, params.config).get(record.series_id, [])
        sched = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
        dist = forecast_window(
            params, params.config, sched, record, selected, 6, 1, 200, RngStream(0)
        )
        self.assertLess(abs(float(dist.samples.mean())), 0.1)
