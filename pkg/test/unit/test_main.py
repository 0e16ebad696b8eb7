import json
import os
import tempfile
import unittest

import pandas as pd
import yaml
from mock import patch

from cdlf.artifact import load_model
from cdlf.config import CONFIG_ENV
from cdlf.diffusion import build_schedule
from cdlf.errors import TrainingDivergedError
from cdlf.main import main
from test.unit.helpers import TINY


class MainTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = os.path.join(self.tmp.name, "out")

    def write_config(self, **changes):
        values = dict(TINY, samples=3, horizon=2, **changes)
        path = os.path.join(self.tmp.name, "run.yaml")
        with open(path, "w") as f:
            yaml.safe_dump(values, f)
        return path

    def run_cli(self, *argv, config=None):
        args = ["-o", self.out]
        if config:
            args = ["-c", config] + args
        main(args + list(argv))

    def output(self, name):
        return os.path.join(self.out, name)

    def synthetic_panel(self, config):
        self.run_cli("gen-synthetic", config=config)
        return self.output("panel.csv")

    def test_unknown_config_key_exits_1(self):
        path = os.path.join(self.tmp.name, "bad.yaml")
        with open(path, "w") as f:
            f.write("smaples: 3\n")
        with self.assertRaises(SystemExit) as ctx:
            self.run_cli("gen-synthetic", config=path)
        self.assertEqual(ctx.exception.code, 1)

    def test_bad_panel_exits_1(self):
        path = os.path.join(self.tmp.name, "panel.csv")
        with open(path, "w") as f:
            f.write("series_id,t,value\na,1,1.0\na,1,2.0\n")
        with self.assertRaises(SystemExit) as ctx:
            self.run_cli("train", path, config=self.write_config())
        self.assertEqual(ctx.exception.code, 1)

    def test_missing_model_exits_1(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)
        with self.assertRaises(SystemExit) as ctx:
            self.run_cli("forecast", panel, "-m", self.output("nope.avro"), config=config)
        self.assertEqual(ctx.exception.code, 1)

    def test_divergence_exits_2(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)
        with patch("cdlf.main.train", side_effect=TrainingDivergedError(4, 0.25)):
            with self.assertRaises(SystemExit) as ctx:
                self.run_cli("train", panel, config=config)
        self.assertEqual(ctx.exception.code, 2)

    def test_gen_synthetic(self):
        config = self.write_config(synthetic_series=4, synthetic_length=5)
        self.run_cli("-s", "11", "gen-synthetic", config=config)
        frame = pd.read_csv(self.output("panel.csv"))
        self.assertEqual(frame["series_id"].nunique(), 4)
        self.assertEqual(len(frame), 20)
        with open(self.output("config.resolved.yaml")) as f:
            resolved = yaml.safe_load(f)
        self.assertEqual(resolved["seed"], 11)
        self.assertEqual(resolved["samples"], 3)

    def test_oracle_sim(self):
        config = self.write_config(
            oracle_horizon=15, oracle_rollouts=50, oracle_pulse_time=5, oracle_latent_dim=3
        )
        self.run_cli("oracle-sim", config=config)
        frame = pd.read_csv(self.output("oracle.csv"))
        self.assertEqual(list(frame["t"]), list(range(1, 16)))
        self.assertTrue((frame["bound"] == frame["bound"].iloc[0]).all())

    def test_kappa_sweep(self):
        config = self.write_config(kappa_grid=[0.2, 0.6, 1.1], oracle_horizon=10)
        self.run_cli("kappa-sweep", config=config)
        frame = pd.read_csv(self.output("sweep.csv"))
        self.assertEqual(list(frame["kappa"]), [0.2, 0.6, 1.1])

    def test_train_forecast_and_check(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)

        self.run_cli("train", panel, config=config)
        model = self.output("model.avro")
        loaded = load_model(model)
        self.assertEqual(loaded.lineage["steps"], 3)
        with open(self.output("training_log.json")) as f:
            self.assertEqual(json.load(f)["steps"], 3)

        self.run_cli("forecast", panel, "-m", model, "--threshold", "50", config=config)
        bands = pd.read_csv(self.output("bands.csv"))
        self.assertEqual(bands["series_id"].nunique(), TINY["synthetic_series"])
        with open(self.output("events.json")) as f:
            events = json.load(f)
        self.assertEqual(len(events), TINY["synthetic_series"])
        for summary in events.values():
            self.assertIn(summary["segment"], ("HP-HR", "HP-LR", "LP-HR", "LP-LR"))
            self.assertEqual(len(summary["peak_lead_probs"]), 2)

        with patch("builtins.print"):
            self.run_cli("stability-check", panel, "-m", model, "--lp-proxy", config=config)
        with open(self.output("stability.json")) as f:
            report = json.load(f)
        self.assertEqual(report["lp_source"], "proxy")
        self.assertEqual(report["actions"], [])

        with patch("builtins.print"):
            self.run_cli("stability-check", panel, "-m", model, "--enforce", config=config)
        with open(self.output("stability.json")) as f:
            report = json.load(f)
        self.assertEqual(report["lp_source"], "user")
        self.assertIsInstance(report["actions"], list)
        self.assertEqual(load_model(model).lineage, loaded.lineage)

    def test_evaluate_trains_when_no_model(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)
        self.run_cli("-np", "2", "evaluate", panel, config=config)
        with open(self.output("metrics.json")) as f:
            metrics = json.load(f)
        self.assertEqual(metrics["mode"], "post-launch")
        self.assertIn("training", metrics)
        self.assertEqual(len(metrics["pinball_curve"]), 99)
        self.assertTrue(os.path.exists(self.output("model.avro")))
        windows = pd.read_csv(self.output("windows.csv"))
        self.assertTrue((windows["horizon"] == 2).all())

    def test_ablate_conditioning(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)
        with patch("builtins.print"):
            self.run_cli("ablate-conditioning", panel, config=config)
        for variant in ("full", "no-references", "no-static"):
            self.assertTrue(os.path.exists(self.output("metrics-{}.json".format(variant))))
        with open(self.output("ablation-conditioning.txt")) as f:
            self.assertTrue(f.read().startswith("Conditioning ablation"))

    def test_model_runs_use_the_trained_schedule(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)
        self.run_cli("train", panel, config=config)
        model = self.output("model.avro")

        built = []

        def spy(*args):
            built.append(build_schedule(*args))
            return built[-1]

        with patch.dict("os.environ"):
            os.environ.pop(CONFIG_ENV, None)
            with patch("cdlf.main.build_schedule", side_effect=spy):
                self.run_cli("forecast", panel, "-m", model, "--series", "s0000")
                with patch("builtins.print"):
                    self.run_cli("stability-check", panel, "-m", model, "--lp-proxy")
        self.assertEqual([sched.steps for sched in built], [TINY["diffusion_steps"]] * 2)
        with open(self.output("config.resolved.yaml")) as f:
            self.assertEqual(yaml.safe_load(f)["diffusion_steps"], TINY["diffusion_steps"])

    def test_conflicting_trained_key_exits_1(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)
        self.run_cli("train", panel, config=config)
        model = self.output("model.avro")
        other = self.write_config(diffusion_steps=7)
        with self.assertRaises(SystemExit) as ctx:
            self.run_cli("forecast", panel, "-m", model, config=other)
        self.assertEqual(ctx.exception.code, 1)

    def test_evaluate_with_model_holds_out_untrained_series(self):
        config = self.write_config()
        panel = self.synthetic_panel(config)
        self.run_cli("-s", "1", "train", panel, config=config)
        model = self.output("model.avro")
        trained = set(load_model(model).lineage["series"])

        self.run_cli("-s", "2", "evaluate", panel, "-m", model, config=config)
        windows = pd.read_csv(self.output("windows.csv"), dtype={"series_id": str})
        scored = set(windows["series_id"])
        self.assertTrue(scored)
        self.assertFalse(scored & trained)
        with open(self.output("metrics.json")) as f:
            self.assertNotIn("training", json.load(f))
