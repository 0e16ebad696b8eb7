from collections import OrderedDict, namedtuple

import numpy as np

from cdlf.errors import ConfigurationError, DimensionError
from cdlf.numerics import relu


class ScoreNetworkConfig(
    namedtuple(
        "ScoreNetworkConfig",
        ["window", "blocks", "channels", "kernel_size", "step_embed_dim"],
    )
):
    """Shape of the dilated causal convolutional score network.

    Block ``l`` uses dilation ``2**l``. Kernel tap ``j`` of a block reads the
    position ``j * dilation`` steps back; taps that fall before the window
    read zeros.
    """

    __slots__ = ()

    def validate(self):
        for key in ("window", "blocks", "channels", "kernel_size"):
            if getattr(self, key) < 1:
                raise ConfigurationError("must be at least 1", key=key)
        if self.step_embed_dim < 2 or self.step_embed_dim % 2:
            raise ConfigurationError("must be a positive even number", key="step_embed_dim")
        return self

    @property
    def receptive_field(self):
        return 1 + (self.kernel_size - 1) * sum(2 ** l for l in range(self.blocks))


ConvCache = namedtuple("ConvCache", ["window", "q", "activations", "gated", "skip"])


def step_embedding(n, dim):
    """Sinusoidal features of the diffusion step ``n``."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = float(n) * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


def score_weight_shapes(config, obs_dim, cond_dim):
    """Parameter names and shapes of the score network, in creation order."""
    C = config.channels
    q_dim = cond_dim + config.step_embed_dim
    shapes = OrderedDict()
    shapes["in_W"] = (C, obs_dim)
    shapes["in_b"] = (C,)
    for l in range(config.blocks):
        prefix = "block{}.".format(l)
        shapes[prefix + "kernel"] = (config.kernel_size, C, C)
        shapes[prefix + "bias"] = (C,)
        shapes[prefix + "cond"] = (C, q_dim)
        shapes[prefix + "res_W"] = (C, C)
        shapes[prefix + "res_b"] = (C,)
        shapes[prefix + "skip_W"] = (C, C)
    shapes["out_W"] = (obs_dim, C)
    shapes["out_b"] = (obs_dim,)
    return shapes


def dilated_causal_conv_forward(window, weights, config, cond, step_embed):
    """Noise estimate for the last row of ``window``.

    Parameters
    ----------
    window : ndarray, shape (..., W, D)
        Oldest row first; leading rows are zero when fewer than ``W``
        observations exist. Any leading batch axes are carried through.
    weights : mapping
        Score-network parameters keyed as in :func:`score_weight_shapes`.
    config : ScoreNetworkConfig
    cond : ndarray, shape (..., m)
        Latent state the estimate is conditioned on.
    step_embed : ndarray, shape (E,)
        Diffusion-step embedding, broadcast to every batch entry.

    Returns
    -------
    eps_hat : ndarray, shape (..., D)
    cache : ConvCache
        Needed by :func:`dilated_causal_conv_backward`.
    """
    window = np.asarray(window, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    step_embed = np.asarray(step_embed, dtype=np.float64)
    if window.ndim < 2 or window.shape[-2] != config.window:
        raise DimensionError(
            "score window must have {} rows, got shape {}".format(config.window, window.shape)
        )
    if window.shape[-1] != weights["in_W"].shape[1]:
        raise DimensionError(
            "score window has {} columns, network expects {}".format(
                window.shape[-1], weights["in_W"].shape[1]
            )
        )
    q = np.concatenate(
        [cond, np.broadcast_to(step_embed, cond.shape[:-1] + step_embed.shape[-1:])],
        axis=-1,
    )
    if q.shape[-1] != weights["block0.cond"].shape[1]:
        raise DimensionError(
            "conditioning width {} does not match network width {}".format(
                q.shape[-1], weights["block0.cond"].shape[1]
            )
        )

    W = config.window
    a = window @ weights["in_W"].T + weights["in_b"]
    activations = [a]
    gated = []
    skip = 0.0
    for l in range(config.blocks):
        prefix = "block{}.".format(l)
        kernel = weights[prefix + "kernel"]
        dilation = 2 ** l
        u = (
            a @ kernel[0].T
            + weights[prefix + "bias"]
            + (q @ weights[prefix + "cond"].T)[..., None, :]
        )
        for j in range(1, config.kernel_size):
            shift = j * dilation
            if shift >= W:
                break
            u[..., shift:, :] += a[..., : W - shift, :] @ kernel[j].T
        v = np.tanh(u)
        skip = skip + v[..., -1, :] @ weights[prefix + "skip_W"].T
        a = a + v @ weights[prefix + "res_W"].T + weights[prefix + "res_b"]
        gated.append(v)
        activations.append(a)

    eps_hat = relu(skip) @ weights["out_W"].T + weights["out_b"]
    return eps_hat, ConvCache(window, q, activations, gated, skip)


def dilated_causal_conv_backward(d_eps, cache, weights, config):
    """Gradients of one unbatched forward pass.

    Returns the parameter gradients (same keys as ``weights``) and the
    gradient with respect to the full conditioning vector ``[cond; e(n)]``.
    """
    window, q, activations, gated, skip = cache
    grads = {}
    grads["out_W"] = np.outer(d_eps, relu(skip))
    grads["out_b"] = np.array(d_eps, dtype=np.float64)
    d_skip = (weights["out_W"].T @ d_eps) * (skip > 0)

    W = config.window
    dq = np.zeros_like(q)
    da = np.zeros_like(activations[-1])
    for l in reversed(range(config.blocks)):
        prefix = "block{}.".format(l)
        v = gated[l]
        a = activations[l]
        kernel = weights[prefix + "kernel"]

        grads[prefix + "res_W"] = da.T @ v
        grads[prefix + "res_b"] = da.sum(axis=0)
        dv = da @ weights[prefix + "res_W"]
        dv[-1] += weights[prefix + "skip_W"].T @ d_skip
        grads[prefix + "skip_W"] = np.outer(d_skip, v[-1])

        du = dv * (1.0 - v ** 2)
        du_total = du.sum(axis=0)
        grads[prefix + "bias"] = du_total
        grads[prefix + "cond"] = np.outer(du_total, q)
        dq += weights[prefix + "cond"].T @ du_total

        d_kernel = np.zeros_like(kernel)
        da_prev = da.copy()
        dilation = 2 ** l
        for j in range(config.kernel_size):
            shift = j * dilation
            if shift >= W:
                break
            d_kernel[j] = du[shift:].T @ a[: W - shift]
            da_prev[: W - shift] += du[shift:] @ kernel[j]
        grads[prefix + "kernel"] = d_kernel
        da = da_prev

    grads["in_W"] = da.T @ window
    grads["in_b"] = da.sum(axis=0)
    return grads, dq
