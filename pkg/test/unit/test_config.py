import os
import tempfile
import unittest

import yaml
from mock import patch

from cdlf.config import (
    DEFAULTS,
    TRAINED_KEYS,
    RunConfig,
    _parse_config,
    inherit_trained,
    load_config_file,
    load_run_config,
    write_resolved_config,
)
from cdlf.errors import ConfigurationError

NO_SUB = """---
seed: 3
fusion: concat
horizon_bands:
  - [1, 4]
  - [5, 8]
"""

SUB_SHALLOW = """---
seed: ${SEED}
fusion: concat
"""

SUB_DEEP = """---
nested:
  samples: ${SAMPLES}
  names:
    - a
    - ${NAME}
"""

SUB_MULTI = """---
label: ${FOO}-x-${BAR}
samples: ${FOO}
"""


class ConfigParsingTest(unittest.TestCase):
    def test_no_substitution(self):
        conf, missing = _parse_config(yaml.safe_load(NO_SUB))
        self.assertDictEqual(
            conf, {"seed": 3, "fusion": "concat", "horizon_bands": [[1, 4], [5, 8]]}
        )
        self.assertSetEqual(missing, set())

    @patch.dict("os.environ", {"SEED": "17"})
    def test_substitution_is_typed(self):
        conf, _ = _parse_config(yaml.safe_load(SUB_SHALLOW))
        self.assertEqual(conf["seed"], 17)

    @patch.dict("os.environ", {"SAMPLES": "2.5", "NAME": "b"})
    def test_deep_substitution(self):
        conf, missing = _parse_config(yaml.safe_load(SUB_DEEP))
        self.assertDictEqual(conf, {"nested": {"samples": 2.5, "names": ["a", "b"]}})
        self.assertSetEqual(missing, set())

    @patch.dict("os.environ", {"FOO": "1", "BAR": "x"})
    def test_multi_substitution(self):
        conf, missing = _parse_config(yaml.safe_load(SUB_MULTI))
        self.assertEqual(conf["label"], "1-x-x")
        self.assertEqual(conf["samples"], 1)
        self.assertSetEqual(missing, set())

    @patch.dict("os.environ", {"BAR": "x"})
    def test_missing(self):
        os.environ.pop("FOO", None)
        conf, missing = _parse_config(yaml.safe_load(SUB_MULTI))
        self.assertIsNone(conf["samples"])
        self.assertSetEqual(missing, {"FOO"})

    def test_unknown_types(self):
        conf, missing = _parse_config({"one": 4, "two": 3.14, "three": True, "four": None})
        self.assertDictEqual(conf, {"one": 4, "two": 3.14, "three": True, "four": None})
        self.assertSetEqual(missing, set())


class RunConfigTest(unittest.TestCase):
    def test_defaults(self):
        config = RunConfig()
        self.assertEqual(list(config.to_dict()), list(DEFAULTS))
        self.assertEqual(config.fusion, "concat")
        self.assertIsNone(config.horizon)
        self.assertIsInstance(config.temperature, float)

    def test_unknown_key(self):
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig({"smaples": 10})
        self.assertIn("smaples", str(ctx.exception))

    def test_type_and_range_errors(self):
        bad = [
            {"samples": 0},
            {"samples": 2.5},
            {"use_static": "yes"},
            {"fusion": "additive"},
            {"target_kappa": 1.0},
            {"beta_start": 0.5, "beta_end": 0.1},
            {"step_embed_dim": 5},
            {"horizon_bands": [[3, 1]]},
            {"kappa_grid": []},
            {"seed": None},
        ]
        for values in bad:
            with self.assertRaises(ConfigurationError, msg=str(values)):
                RunConfig(values)

    def test_error_names_key(self):
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig({"t0": 0})
        self.assertEqual(ctx.exception.key, "t0")

    def test_replace(self):
        config = RunConfig({"seed": 1})
        other = config.replace(fusion="multiplicative")
        self.assertEqual(other.fusion, "multiplicative")
        self.assertEqual(other.seed, 1)
        self.assertEqual(config.fusion, "concat")
        self.assertNotEqual(config, other)
        self.assertEqual(config, RunConfig({"seed": 1}))

    def test_explicit_keys(self):
        config = RunConfig({"seed": 1})
        self.assertEqual(config.explicit, {"seed"})
        self.assertEqual(config.replace(samples=4).explicit, {"seed", "samples"})


class InheritTrainedTest(unittest.TestCase):
    def setUp(self):
        self.trained = RunConfig({"diffusion_steps": 5, "normalization": "log_increment"})

    def test_defaulted_keys_follow_the_model(self):
        config = inherit_trained(RunConfig({"samples": 3}), self.trained)
        self.assertEqual(config.diffusion_steps, 5)
        self.assertEqual(config.normalization, "log_increment")
        self.assertEqual(config.samples, 3)
        for key in TRAINED_KEYS:
            self.assertEqual(getattr(config, key), getattr(self.trained, key))

    def test_matching_explicit_key_is_accepted(self):
        config = inherit_trained(RunConfig({"diffusion_steps": 5}), self.trained)
        self.assertEqual(config.diffusion_steps, 5)

    def test_conflicting_explicit_key(self):
        with self.assertRaises(ConfigurationError) as ctx:
            inherit_trained(RunConfig({"diffusion_steps": 7}), self.trained)
        self.assertEqual(ctx.exception.key, "diffusion_steps")


class ConfigFileTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, text):
        path = os.path.join(self.tmp.name, "run.yaml")
        with open(path, "w") as f:
            f.write(text)
        return path

    def test_empty_file(self):
        self.assertEqual(load_config_file(self.write("")), ({}, set()))

    def test_top_level_must_be_mapping(self):
        with self.assertRaises(ConfigurationError):
            load_config_file(self.write("- 1\n- 2\n"))

    def test_overrides_win_and_none_is_skipped(self):
        path = self.write("seed: 4\nsamples: 20\n")
        config = load_run_config(path, {"samples": 7, "seed": None})
        self.assertEqual(config.samples, 7)
        self.assertEqual(config.seed, 4)

    @patch.dict("os.environ", {})
    def test_missing_variable(self):
        os.environ.pop("CDLF_TEST_UNSET", None)
        path = self.write("samples: ${CDLF_TEST_UNSET}\n")
        with self.assertRaises(ConfigurationError) as ctx:
            load_run_config(path)
        self.assertIn("CDLF_TEST_UNSET", str(ctx.exception))

    def test_path_from_environment(self):
        path = self.write("seed: 9\n")
        with patch.dict("os.environ", {"CDLF_CONFIG": path}):
            self.assertEqual(load_run_config().seed, 9)

    def test_resolved_config_reloads(self):
        config = RunConfig({"seed": 5, "horizon": 12, "fusion": "multiplicative"})
        path = write_resolved_config(config, self.tmp.name)
        self.assertEqual(os.path.basename(path), "config.resolved.yaml")
        self.assertEqual(load_run_config(path), config)
