from collections import OrderedDict

import numpy as np

from cdlf.config import RunConfig
from cdlf.model import ModelConfig, ModelParameters, parameter_shapes
from cdlf.monitoring import MonitoringProvider
from cdlf.numerics import RngStream
from cdlf.panel import generate_synthetic, normalize_max_align

TINY = {
    "references_k": 2,
    "ref_hidden": 3,
    "static_hidden": 2,
    "latent_dim": 3,
    "window": 4,
    "blocks": 2,
    "channels": 3,
    "kernel_size": 2,
    "step_embed_dim": 4,
    "diffusion_steps": 5,
    "batch_size": 2,
    "max_steps": 3,
    "plateau_steps": 1000,
    "log_interval": 1,
    "stability_interval": 1000,
    "stability_probe_series": 2,
    "power_iters": 50,
    "samples": 8,
    "t0": 3,
    "synthetic_series": 6,
    "synthetic_length": 8,
    "lp_proxy_samples": 16,
    "oracle_rollouts": 200,
    "oracle_horizon": 20,
}


def tiny_config(**changes):
    values = dict(TINY)
    values.update(changes)
    return RunConfig(values)


def tiny_panel(n_series=6, length=8, seed=3):
    return normalize_max_align(generate_synthetic(n_series, length, seed))


def tiny_model_config(config=None, obs_dim=1, descriptor_dim=6):
    return ModelConfig.from_run_config(config or tiny_config(), obs_dim, descriptor_dim)


def random_params(model_config, seed=0, scale=None):
    params = ModelParameters.initialize(model_config, RngStream(seed))
    if scale is not None:
        rng = RngStream(seed).spawn("noise")
        for name in params:
            params[name] = scale * rng.normal(params[name].shape)
    return params


def zero_params(model_config):
    tensors = OrderedDict(
        (name, np.zeros(shape)) for name, shape in parameter_shapes(model_config).items()
    )
    return ModelParameters(tensors, model_config)


class RecordingMonitoringProvider(MonitoringProvider):
    def __init__(self):
        self.calls = []
        super().__init__()

    def reset(self):
        self.calls = []

    def on_event(self, event, event_state, **kwargs):
        self.calls.append((event, event_state, kwargs))
