import os
import unittest

from cdlf.config import load_run_config

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "config")

slow = unittest.skipUnless(
    os.getenv("CDLF_SLOW_TESTS") == "1", "set CDLF_SLOW_TESTS=1 to run acceptance tests"
)


def acceptance_config(**overrides):
    return load_run_config(os.path.join(CONFIG_DIR, "acceptance.yaml"), overrides)
