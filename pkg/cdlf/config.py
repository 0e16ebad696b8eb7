import copy
import os
import re
from collections import OrderedDict

import pyaml
import yaml

from cdlf.errors import ConfigurationError

CONFIG_ENV = "CDLF_CONFIG"
RESOLVED_CONFIG_NAME = "config.resolved.yaml"

DEFAULTS = OrderedDict(
    [
        ("seed", 0),
        # model
        ("references_k", 5),
        ("temperature", 1.0),
        ("fusion", "concat"),
        ("use_references", True),
        ("use_static", True),
        ("ref_hidden", 16),
        ("static_hidden", 8),
        ("latent_dim", 16),
        ("window", 8),
        ("blocks", 3),
        ("channels", 16),
        ("kernel_size", 2),
        ("step_embed_dim", 32),
        ("clip_bound", 5.0),
        # schedule
        ("diffusion_steps", 50),
        ("beta_start", 1e-4),
        ("beta_end", 0.1),
        # optimisation
        ("learning_rate", 1e-3),
        ("beta1", 0.9),
        ("beta2", 0.999),
        ("adam_eps", 1e-8),
        ("grad_clip", 1.0),
        ("batch_size", 8),
        ("max_steps", 20000),
        ("plateau_steps", 2000),
        ("plateau_tolerance", 1e-3),
        ("nonfinite_limit", 5),
        ("log_interval", 500),
        # stability
        ("stability_enforce", True),
        ("stability_interval", 100),
        ("target_kappa", 0.8),
        ("lipschitz_p", 1.0),
        ("gate_widening", 0.1),
        ("reinit_threshold", 1.2),
        ("reinit_patience", 3),
        ("stability_probe_series", 4),
        ("fd_step", 1e-5),
        ("power_iters", 1000),
        ("power_tol", 1e-13),
        ("lp_proxy_samples", 256),
        # protocol
        ("mode", "post-launch"),
        ("t0", 6),
        ("horizon", None),
        ("samples", 100),
        ("stride", 1),
        ("train_fraction", 0.8),
        ("horizon_bands", [[1, 8], [9, 16]]),
        ("normalization", "max"),
        ("episode_min_len", 0),
        ("metric_scale", 1.0),
        ("workers", None),
        # synthetic panel
        ("synthetic_series", 40),
        ("synthetic_length", 24),
        ("synthetic_family", "bass"),
        ("synthetic_noise", 0.1),
        # oracle
        ("oracle_rho", 0.5),
        ("oracle_lx", 0.4),
        ("oracle_lp", 1.0),
        ("oracle_eps_gen", 0.1),
        ("oracle_eps_f", 0.0),
        ("oracle_e0", 0.0),
        ("oracle_latent_dim", 4),
        ("oracle_obs_dim", 1),
        ("oracle_horizon", 60),
        ("oracle_rollouts", 10000),
        ("oracle_pulse_time", None),
        ("oracle_pulse_magnitude", 1.0),
        ("oracle_pulse_direction", "unobserved"),
        ("oracle_coupling", "aligned"),
        ("oracle_common_noise", True),
        ("kappa_grid", [0.1, 0.3, 0.5, 0.7, 0.9, 0.99]),
    ]
)

# (kind, lower, upper, choices); bounds are inclusive, None means unbounded
_INT, _FLOAT, _BOOL, _STR, _ANY = "int", "float", "bool", "str", "any"
RULES = {
    "seed": (_INT, 0, 2 ** 64 - 1, None),
    "references_k": (_INT, 1, None, None),
    "temperature": (_FLOAT, 0, None, None),
    "fusion": (_STR, None, None, ("concat", "multiplicative")),
    "use_references": (_BOOL, None, None, None),
    "use_static": (_BOOL, None, None, None),
    "ref_hidden": (_INT, 1, None, None),
    "static_hidden": (_INT, 1, None, None),
    "latent_dim": (_INT, 1, None, None),
    "window": (_INT, 1, None, None),
    "blocks": (_INT, 1, None, None),
    "channels": (_INT, 1, None, None),
    "kernel_size": (_INT, 1, None, None),
    "step_embed_dim": (_INT, 2, None, None),
    "clip_bound": (_FLOAT, 1e-12, None, None),
    "diffusion_steps": (_INT, 1, None, None),
    "beta_start": (_FLOAT, 1e-12, 1 - 1e-12, None),
    "beta_end": (_FLOAT, 1e-12, 1 - 1e-12, None),
    "learning_rate": (_FLOAT, 0, None, None),
    "beta1": (_FLOAT, 0, 1 - 1e-12, None),
    "beta2": (_FLOAT, 0, 1 - 1e-12, None),
    "adam_eps": (_FLOAT, 0, None, None),
    "grad_clip": (_FLOAT, 0, None, None),
    "batch_size": (_INT, 1, None, None),
    "max_steps": (_INT, 0, None, None),
    "plateau_steps": (_INT, 1, None, None),
    "plateau_tolerance": (_FLOAT, 0, None, None),
    "nonfinite_limit": (_INT, 0, None, None),
    "log_interval": (_INT, 1, None, None),
    "stability_enforce": (_BOOL, None, None, None),
    "stability_interval": (_INT, 1, None, None),
    "target_kappa": (_FLOAT, 1e-12, 1 - 1e-12, None),
    "lipschitz_p": (_FLOAT, 0, None, None),
    "gate_widening": (_FLOAT, 0, 1 - 1e-12, None),
    "reinit_threshold": (_FLOAT, 0, None, None),
    "reinit_patience": (_INT, 1, None, None),
    "stability_probe_series": (_INT, 1, None, None),
    "fd_step": (_FLOAT, 1e-15, None, None),
    "power_iters": (_INT, 1, None, None),
    "power_tol": (_FLOAT, 0, None, None),
    "lp_proxy_samples": (_INT, 1, None, None),
    "mode": (_STR, None, None, ("pre-launch", "post-launch")),
    "t0": (_INT, 1, None, None),
    "horizon": (_INT, 0, None, None),
    "samples": (_INT, 1, None, None),
    "stride": (_INT, 1, None, None),
    "train_fraction": (_FLOAT, 1e-12, 1 - 1e-12, None),
    "horizon_bands": (_ANY, None, None, None),
    "normalization": (_STR, None, None, ("max", "log_increment", "none")),
    "episode_min_len": (_INT, 0, None, None),
    "metric_scale": (_FLOAT, 1e-12, None, None),
    "workers": (_INT, 1, None, None),
    "synthetic_series": (_INT, 0, None, None),
    "synthetic_length": (_INT, 1, None, None),
    "synthetic_family": (_STR, None, None, ("bass", "persistent")),
    "synthetic_noise": (_FLOAT, 0, None, None),
    "oracle_rho": (_FLOAT, 0, None, None),
    "oracle_lx": (_FLOAT, 0, None, None),
    "oracle_lp": (_FLOAT, 0, None, None),
    "oracle_eps_gen": (_FLOAT, 0, None, None),
    "oracle_eps_f": (_FLOAT, 0, None, None),
    "oracle_e0": (_FLOAT, 0, None, None),
    "oracle_latent_dim": (_INT, 1, None, None),
    "oracle_obs_dim": (_INT, 1, None, None),
    "oracle_horizon": (_INT, 1, None, None),
    "oracle_rollouts": (_INT, 1, None, None),
    "oracle_pulse_time": (_INT, 1, None, None),
    "oracle_pulse_magnitude": (_FLOAT, None, None, None),
    "oracle_pulse_direction": (_STR, None, None, ("unobserved", "observed")),
    "oracle_coupling": (_STR, None, None, ("aligned", "random")),
    "oracle_common_noise": (_BOOL, None, None, None),
    "kappa_grid": (_ANY, None, None, None),
}

# keys whose value may be null
NULLABLE = {"horizon", "workers", "oracle_pulse_time"}

# keys a trained model is bound to; later runs on the model inherit them
TRAINED_KEYS = ("diffusion_steps", "beta_start", "beta_end", "normalization", "episode_min_len")


class RunConfig(object):
    """Every tunable of a run, validated.

    Values are attributes named after their keys; see :data:`DEFAULTS` for
    the documented keys and defaults.

    ``explicit`` holds the keys that were given rather than defaulted.
    """

    def __init__(self, values=None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(
                "unknown key(s) {}".format(", ".join(unknown)), key="config"
            )
        merged = copy.deepcopy(DEFAULTS)
        merged.update(copy.deepcopy(values))
        for key, value in merged.items():
            setattr(self, key, _validate(key, value))
        self._check_relations()
        self.explicit = frozenset(values)

    def _check_relations(self):
        if self.beta_start > self.beta_end:
            raise ConfigurationError("must not exceed beta_end", key="beta_start")
        if self.step_embed_dim % 2:
            raise ConfigurationError("must be even", key="step_embed_dim")
        bands = self.horizon_bands
        if not isinstance(bands, list) or not all(
            isinstance(b, (list, tuple)) and len(b) == 2 and 1 <= b[0] <= b[1] for b in bands
        ):
            raise ConfigurationError("must be a list of [lo, hi] lead ranges", key="horizon_bands")
        grid = self.kappa_grid
        if not isinstance(grid, list) or not grid or not all(
            isinstance(k, (int, float)) and k >= 0 for k in grid
        ):
            raise ConfigurationError(
                "must be a non-empty list of non-negative numbers", key="kappa_grid"
            )

    def to_dict(self):
        return OrderedDict((key, getattr(self, key)) for key in DEFAULTS)

    def replace(self, **changes):
        values = self.to_dict()
        values.update(changes)
        config = RunConfig(values)
        config.explicit = self.explicit | frozenset(changes)
        return config

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "RunConfig(seed={}, mode={}, fusion={})".format(self.seed, self.mode, self.fusion)


def _validate(key, value):
    if value is None:
        if key in NULLABLE:
            return None
        raise ConfigurationError("must not be null", key=key)
    kind, lo, hi, choices = RULES[key]
    if kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigurationError("must be true or false, got {!r}".format(value), key=key)
    elif kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError("must be an integer, got {!r}".format(value), key=key)
    elif kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError("must be a number, got {!r}".format(value), key=key)
        value = float(value)
    elif kind == _STR:
        if not isinstance(value, str):
            raise ConfigurationError("must be a string, got {!r}".format(value), key=key)
    if choices is not None and value not in choices:
        raise ConfigurationError(
            "must be one of {}, got {!r}".format(", ".join(choices), value), key=key
        )
    if lo is not None and value < lo:
        raise ConfigurationError("must be at least {}, got {}".format(lo, value), key=key)
    if hi is not None and value > hi:
        raise ConfigurationError("must be at most {}, got {}".format(hi, value), key=key)
    return value


def load_config_file(filename):
    """Loads a config file and substitutes environment variables.

    Patterns ``${ENV_VAR}`` inside string values are replaced with the
    variable's content and the result is re-read as a YAML scalar, so
    ``samples: ${N}`` with ``N=50`` yields the integer 50. Unset variables
    are replaced with an empty string and reported.

    :param str filename: The path to the config file to be loaded
    :returns:
        - conf (:py:class:`dict`) - The parsed config dictionary
        - missing_vars (:py:class:`set`) - Names of unset environment
          variables; empty when every substitution succeeded
    """
    with open(filename, "r") as f:
        config = yaml.safe_load(f)
    if config is None:
        config = {}
    if not isinstance(config, dict):
        raise ConfigurationError("top level must be a mapping", key=filename)
    return _parse_config(config)


_ENV_PATTERN = re.compile(r"\${(\w+)}")


def _parse_config(element):
    """Recursive worker of :func:`load_config_file`; returns the substituted
    element and the set of missing variables."""
    missing = set()
    if isinstance(element, dict):
        out = {}
        for key, value in element.items():
            out[key], new_missing = _parse_config(value)
            missing.update(new_missing)
        return out, missing
    if isinstance(element, list):
        out = []
        for value in element:
            value, new_missing = _parse_config(value)
            out.append(value)
            missing.update(new_missing)
        return out, missing
    if not isinstance(element, str) or not _ENV_PATTERN.search(element):
        return element, missing

    def _substitute(match):
        value = os.getenv(match.group(1))
        if value is None:
            missing.add(match.group(1))
            return ""
        return value

    substituted = _ENV_PATTERN.sub(_substitute, element)
    return (yaml.safe_load(substituted) if substituted else None), missing


def load_run_config(path=None, overrides=None):
    """Builds a :class:`RunConfig` from ``path`` (or ``$CDLF_CONFIG``) and
    non-null ``overrides``."""
    path = path or os.getenv(CONFIG_ENV)
    values = {}
    if path:
        values, missing = load_config_file(path)
        if missing:
            raise ConfigurationError(
                "environment variable(s) not set: {}".format(", ".join(sorted(missing))),
                key=path,
            )
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig(values)


def inherit_trained(config, trained):
    """Takes the :data:`TRAINED_KEYS` of ``config`` from the configuration a
    model was trained with.

    :raises ConfigurationError: if ``config`` explicitly sets one of them to
        a different value
    """
    changes = {}
    for key in TRAINED_KEYS:
        value = getattr(trained, key)
        if key in config.explicit and getattr(config, key) != value:
            raise ConfigurationError(
                "model was trained with {!r}, got {!r}".format(value, getattr(config, key)),
                key=key,
            )
        changes[key] = value
    return config.replace(**changes)


def write_resolved_config(config, out_dir):
    path = os.path.join(out_dir, RESOLVED_CONFIG_NAME)
    with open(path, "w") as f:
        pyaml.dump(dict(config.to_dict()), f)
    return path
