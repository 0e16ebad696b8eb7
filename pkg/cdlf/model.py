import hashlib
import logging
from collections import OrderedDict, namedtuple

import numpy as np

from cdlf.context import FUSION_MODES, build_context, context_backward
from cdlf.convnet import (
    ScoreNetworkConfig,
    dilated_causal_conv_backward,
    dilated_causal_conv_forward,
    score_weight_shapes,
    step_embedding,
)
from cdlf.diffusion import assemble_window, forward_noise
from cdlf.errors import ConfigurationError, DimensionError, NonFiniteError
from cdlf.numerics import GruParams, gru_sequence_backward, gru_sequence_forward

logger = logging.getLogger("cdlf.model")

GROUPS = ("ref_encoder", "fusion", "aggregator", "static", "init", "transition", "score")


class ModelConfig(
    namedtuple(
        "ModelConfig",
        [
            "obs_dim",
            "descriptor_dim",
            "references_k",
            "temperature",
            "fusion",
            "use_references",
            "use_static",
            "ref_hidden",
            "static_hidden",
            "latent_dim",
            "clip_bound",
            "score",
        ],
    )
):
    """Architecture of one model. ``score`` is a :class:`ScoreNetworkConfig`."""

    __slots__ = ()

    @classmethod
    def from_run_config(cls, config, obs_dim, descriptor_dim):
        score = ScoreNetworkConfig(
            window=config.window,
            blocks=config.blocks,
            channels=config.channels,
            kernel_size=config.kernel_size,
            step_embed_dim=config.step_embed_dim,
        )
        return cls(
            obs_dim=obs_dim,
            descriptor_dim=descriptor_dim,
            references_k=config.references_k,
            temperature=config.temperature,
            fusion=config.fusion,
            use_references=config.use_references,
            use_static=config.use_static,
            ref_hidden=config.ref_hidden,
            static_hidden=config.static_hidden,
            latent_dim=config.latent_dim,
            clip_bound=config.clip_bound,
            score=score,
        ).validate()

    def validate(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(
                "must be one of {}, got {!r}".format(", ".join(FUSION_MODES), self.fusion),
                key="fusion",
            )
        for key in ("obs_dim", "references_k", "ref_hidden", "static_hidden", "latent_dim"):
            if getattr(self, key) < 1:
                raise ConfigurationError("must be at least 1", key=key)
        if self.descriptor_dim < 0:
            raise ConfigurationError("must not be negative", key="descriptor_dim")
        if self.temperature < 0:
            raise ConfigurationError("must not be negative", key="temperature")
        if not self.clip_bound > 0:
            raise ConfigurationError("must be positive", key="clip_bound")
        self.score.validate()
        return self

    @property
    def context_dim(self):
        return self.ref_hidden + self.static_hidden

    def to_dict(self):
        out = self._asdict()
        out["score"] = self.score._asdict()
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["score"] = ScoreNetworkConfig(**data["score"])
        return cls(**data).validate()


def parameter_shapes(config):
    """Every learnable tensor of the model keyed ``<group>.<name>``."""
    D, p = config.obs_dim, config.descriptor_dim
    d, ds, m = config.ref_hidden, config.static_hidden, config.latent_dim
    shapes = OrderedDict()
    _gru_shapes(shapes, "ref_encoder", d, D)
    if config.fusion == "concat":
        shapes["fusion.W"] = (d, d + 1)
        shapes["fusion.b"] = (d,)
    _gru_shapes(shapes, "aggregator", d, d)
    shapes["static.W1"] = (ds, p)
    shapes["static.b1"] = (ds,)
    shapes["static.W2"] = (ds, ds)
    shapes["static.b2"] = (ds,)
    shapes["init.W"] = (m, d + ds)
    shapes["init.b"] = (m,)
    _gru_shapes(shapes, "transition", m, D + d + ds)
    for name, shape in score_weight_shapes(config.score, D, m).items():
        shapes["score." + name] = shape
    return shapes


def _gru_shapes(shapes, prefix, hidden, inputs):
    for name in GruParams.INPUT:
        shapes["{}.{}".format(prefix, name)] = (hidden, inputs)
    for name in GruParams.RECURRENT:
        shapes["{}.{}".format(prefix, name)] = (hidden, hidden)
    for name in GruParams.BIAS:
        shapes["{}.{}".format(prefix, name)] = (hidden,)


def _init_tensor(name, shape, rng):
    leaf = name.split(".")[-1]
    if len(shape) == 1:
        return np.zeros(shape)
    if name == "fusion.W":
        # identity on the embedding block, zero on the weight column
        return np.eye(shape[0], shape[1])
    if leaf == "kernel":
        fan_in = shape[0] * shape[2]
    else:
        fan_in = shape[-1]
    scale = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-scale, scale, shape)


class ModelParameters(object):
    """All learnable tensors, addressed by ``<group>.<name>``.

    Behaves like a mutable mapping from names to float64 arrays.
    """

    def __init__(self, tensors, config):
        self.tensors = OrderedDict(tensors)
        self.config = config

    @classmethod
    def initialize(cls, config, rng):
        """Seeded initialization. Each group draws from its own sub-stream
        keyed by the group name, so adding or dropping a group leaves the
        others untouched."""
        tensors = OrderedDict()
        streams = {}
        for name, shape in parameter_shapes(config).items():
            group = name.split(".")[0]
            if group not in streams:
                streams[group] = rng.spawn(group)
            tensors[name] = _init_tensor(name, shape, streams[group])
        return cls(tensors, config)

    def reinitialize_group(self, group, rng):
        names = self.group_names(group)
        stream = rng.spawn(group)
        for name in names:
            self.tensors[name] = _init_tensor(name, self.tensors[name].shape, stream)
        return names

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        if name not in self.tensors:
            raise DimensionError("unknown parameter {}".format(name))
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.tensors[name].shape:
            raise DimensionError(
                "parameter {} has shape {}, got {}".format(name, self.tensors[name].shape, value.shape)
            )
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def keys(self):
        return self.tensors.keys()

    def items(self):
        return self.tensors.items()

    def group_names(self, group):
        prefix = group + "."
        return [name for name in self.tensors if name.startswith(prefix)]

    def gru(self, prefix):
        return GruParams(**{f: self.tensors["{}.{}".format(prefix, f)] for f in GruParams._fields})

    def set_gru(self, prefix, p):
        for field, value in p._asdict().items():
            self["{}.{}".format(prefix, field)] = value

    def score_weights(self):
        return {
            name[len("score.") :]: value
            for name, value in self.tensors.items()
            if name.startswith("score.")
        }

    def copy(self):
        return ModelParameters(((k, v.copy()) for k, v in self.tensors.items()), self.config)

    def digest(self, exclude_prefixes=()):
        """SHA-256 over names, shapes and bytes of every tensor not excluded."""
        h = hashlib.sha256()
        for name, value in self.tensors.items():
            if any(name.startswith(p) for p in exclude_prefixes):
                continue
            h.update(name.encode("utf-8"))
            h.update(str(value.shape).encode("utf-8"))
            h.update(np.ascontiguousarray(value, dtype=np.float64).tobytes())
        return h.hexdigest()

    def zeros_like(self):
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items())


TrainingInstance = namedtuple(
    "TrainingInstance", ["descriptor", "references", "trajectory", "t0", "n", "noise"]
)
TrainingInstance.__doc__ = """One denoising target.

``trajectory`` is the full T x D series, ``t0`` the 1-based position being
noised, ``n`` the diffusion step and ``noise`` the injected Gaussian draw.
``references`` are selected references from the library without the focal
series.
"""


def instance_loss(params, instance, sched, config, keep_cache=False):
    traj = np.asarray(instance.trajectory, dtype=np.float64)
    t0, n = instance.t0, instance.n
    if not 1 <= t0 <= traj.shape[0]:
        raise DimensionError("t0={} outside series of length {}".format(t0, traj.shape[0]))
    ctx, ctx_cache = build_context(
        instance.descriptor, instance.references, params, config, keep_cache=True
    )
    prefix = traj[: t0 - 1]
    inputs = np.concatenate([prefix, np.tile(ctx.c, (prefix.shape[0], 1))], axis=1)
    trans_p = params.gru("transition")
    states, gates = gru_sequence_forward(inputs, trans_p, ctx.h0)
    h_prev = states[-1]

    xn = forward_noise(traj[t0 - 1], n, instance.noise, sched)
    window = assemble_window(prefix, xn, config.score.window)
    eps_hat, conv_cache = dilated_causal_conv_forward(
        window,
        params.score_weights(),
        config.score,
        h_prev,
        step_embedding(n, config.score.step_embed_dim),
    )
    diff = eps_hat - instance.noise
    loss = float(diff @ diff)
    if not keep_cache:
        return loss
    return loss, (diff, ctx_cache, inputs, states, gates, conv_cache)


def loss_and_grads(params, batch, sched, config):
    """Mean squared noise-prediction error over ``batch`` and its gradient
    with respect to every parameter.

    Gradients flow through the score network, the latent transition over the
    observed prefix and every context encoder.
    """
    if not batch:
        raise DimensionError("empty training batch")
    grads = params.zeros_like()
    total = 0.0
    scale = 1.0 / len(batch)
    trans_p = params.gru("transition")
    m = config.latent_dim
    for instance in batch:
        loss, cache = instance_loss(params, instance, sched, config, keep_cache=True)
        diff, ctx_cache, inputs, states, gates, conv_cache = cache
        total += loss

        score_grads, dq = dilated_causal_conv_backward(
            2.0 * scale * diff, conv_cache, params.score_weights(), config.score
        )
        for name, value in score_grads.items():
            grads["score." + name] += value

        d_h0, d_inputs, trans_grads = gru_sequence_backward(dq[:m], inputs, states, gates, trans_p)
        for field, value in trans_grads._asdict().items():
            grads["transition." + field] += value
        d_c = d_inputs[:, config.obs_dim :].sum(axis=0)

        for name, value in context_backward(d_h0, d_c, ctx_cache, params, config).items():
            grads[name] += value

    loss = total * scale
    if not np.isfinite(loss):
        raise NonFiniteError("denoising loss is not finite ({})".format(loss))
    return loss, grads
