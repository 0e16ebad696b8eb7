import logging
from multiprocessing.dummy import Pool

import numpy as np

from cdlf.context import transition
from cdlf.convnet import dilated_causal_conv_forward, step_embedding
from cdlf.errors import ConfigurationError, DimensionError, StepOutOfRangeError
from cdlf.numerics import RngStream, ensure_finite

logger = logging.getLogger("cdlf.diffusion")


class NoiseSchedule(object):
    """Variance schedule of an N-step diffusion chain.

    Tables are indexed by the step ``n`` directly and have length ``N + 1``;
    index 0 holds the clean-data convention ``beta_0 = 0``,
    ``alpha_bar_0 = 1`` and ``sigma2_0 = 0``.
    """

    def __init__(self, betas):
        betas = ensure_finite(betas, "betas")
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigurationError("need at least one diffusion step", key="diffusion_steps")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigurationError("every beta must lie in (0, 1)", key="betas")
        self.steps = int(betas.size)
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigma2 = np.zeros(self.steps + 1)
        self.sigma2[1:] = (
            (1.0 - self.alpha_bars[:-1]) / (1.0 - self.alpha_bars[1:]) * self.betas[1:]
        )

    def check_step(self, n, lowest=1):
        if not lowest <= n <= self.steps:
            raise StepOutOfRangeError(n, self.steps, lowest)

    def to_dict(self):
        return {"betas": self.betas[1:].tolist()}

    def __repr__(self):
        return "NoiseSchedule(steps={}, beta=[{:g}..{:g}])".format(
            self.steps, self.betas[1], self.betas[-1]
        )


def build_schedule(N, beta_start, beta_end):
    """Linear schedule from ``beta_start`` to ``beta_end``."""
    if N < 1:
        raise ConfigurationError("must be at least 1", key="diffusion_steps")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(
            "need 0 < beta_start <= beta_end < 1, got {} and {}".format(beta_start, beta_end),
            key="beta_start",
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(N)))


def forward_noise(x0, n, eps, sched):
    """``sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps``; ``n = 0`` returns ``x0``."""
    sched.check_step(n, lowest=0)
    ab = sched.alpha_bars[n]
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * eps


def posterior_params(xn, x0, n, sched):
    """Mean and variance of ``q(x^{n-1} | x^n, x^0)``."""
    sched.check_step(n)
    ab, ab_prev = sched.alpha_bars[n], sched.alpha_bars[n - 1]
    beta, alpha = sched.betas[n], sched.alphas[n]
    mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * np.asarray(x0, dtype=np.float64) + (
        np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    ) * np.asarray(xn, dtype=np.float64)
    return mean, sched.sigma2[n]


def reverse_mean(xn, eps_hat, n, sched):
    sched.check_step(n)
    xn = np.asarray(xn, dtype=np.float64)
    scale = sched.betas[n] / np.sqrt(1.0 - sched.alpha_bars[n])
    return (xn - scale * eps_hat) / np.sqrt(sched.alphas[n])


def assemble_window(history, current, width):
    """Score-network input: the last ``width - 1`` rows of ``history`` (clean
    past values) followed by ``current``, zero-padded on the left.

    Accepts a leading batch axis on both arguments.
    """
    history = np.asarray(history, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    window = np.zeros(current.shape[:-1] + (width, current.shape[-1]))
    window[..., -1, :] = current
    keep = min(width - 1, history.shape[-2])
    if keep:
        window[..., width - 1 - keep : width - 1, :] = history[..., history.shape[-2] - keep :, :]
    return window


def score_predict(noisy_window, h_prev, n, params, config):
    """Noise estimate of the score network conditioned on ``[h_prev; e(n)]``."""
    eps_hat, _ = dilated_causal_conv_forward(
        noisy_window,
        params.score_weights(),
        config.score,
        h_prev,
        step_embedding(n, config.score.step_embed_dim),
    )
    return eps_hat


def _draw(rng, shape):
    if isinstance(rng, RngStream):
        return rng.normal(shape)
    return np.stack([r.normal(shape[1:]) for r in rng])


def sample_next(h_prev, history, params, sched, rng, config):
    """Ancestral sample of the next observation.

    Starts from ``x^N ~ N(0, I)`` and applies the reverse kernel down to
    ``n = 1``, which adds no noise. The result is clipped to
    ``[-clip_bound, clip_bound]``.

    ``h_prev`` may be a batch of states (one row per rollout); ``rng`` is then
    a list with one stream per row, so each row's draws do not depend on how
    rows are batched.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    D = params["score.out_b"].shape[0]
    shape = h_prev.shape[:-1] + (D,)
    x = _draw(rng, shape)
    for n in range(sched.steps, 0, -1):
        window = assemble_window(history, x, config.score.window)
        eps_hat = score_predict(window, h_prev, n, params, config)
        x = reverse_mean(x, eps_hat, n, sched)
        if n > 1:
            x = x + np.sqrt(sched.sigma2[n]) * _draw(rng, shape)
    return np.clip(x, -config.clip_bound, config.clip_bound)


class ForecastDistribution(object):
    """Sampled future trajectories from one forecast origin.

    ``samples`` has shape ``(M, horizon, D)`` on the model's normalized
    scale. ``inverse`` (optional) maps normalized values back to raw units
    through its ``invert`` method.
    """

    def __init__(self, origin, samples, inverse=None, series_id=None):
        samples = ensure_finite(samples, "forecast samples")
        if samples.ndim != 3:
            raise DimensionError("samples must be M x horizon x D, got {}".format(samples.shape))
        self.origin = origin
        self.samples = samples
        self.inverse = inverse
        self.series_id = series_id

    @property
    def num_samples(self):
        return self.samples.shape[0]

    @property
    def horizon(self):
        return self.samples.shape[1]

    def raw_samples(self):
        if self.inverse is None:
            return self.samples
        return self.inverse.invert(self.samples)

    def quantiles(self, levels):
        """Per-time quantiles, shape ``(len(levels), horizon, D)``."""
        return np.quantile(self.samples, levels, axis=0)

    def median_path(self):
        return np.median(self.samples, axis=0)

    def __repr__(self):
        return "ForecastDistribution(series={}, origin={}, M={}, horizon={})".format(
            self.series_id, self.origin, self.num_samples, self.horizon
        )


def _rollout_chunk(h_start, prefix, c, streams, horizon, params, sched, config):
    b = len(streams)
    trans_p = params.gru("transition")
    h = np.tile(h_start, (b, 1))
    history = np.tile(prefix, (b, 1, 1))
    out = np.zeros((b, horizon, prefix.shape[-1]))
    for step in range(horizon):
        x = sample_next(h, history, params, sched, streams, config)
        out[:, step] = x
        history = np.concatenate([history, x[:, None, :]], axis=1)
        if step + 1 < horizon:
            h = transition(h, x, c, trans_p)
    return out


def rollout(context, prefix, t0, horizon, M, params, sched, rng, config, workers=None):
    """Draws ``M`` trajectories of length ``horizon`` starting at ``t0``.

    The latent state is first rolled through the observed ``prefix``
    (``t0 - 1`` rows), then each rollout alternates :func:`sample_next` and
    :func:`~cdlf.context.transition`. Rollout ``i`` draws from
    ``rng.spawn(i)``; rollouts are split into ``workers`` chunks run on a
    thread pool and merged in index order.
    """
    if horizon < 0:
        raise ConfigurationError("must not be negative, got {}".format(horizon), key="horizon")
    if t0 < 1:
        raise ConfigurationError("must be at least 1, got {}".format(t0), key="t0")
    if M < 1:
        raise ConfigurationError("must be at least 1, got {}".format(M), key="samples")
    D = params["score.out_b"].shape[0]
    prefix = np.asarray(prefix, dtype=np.float64).reshape(-1, D)
    if prefix.shape[0] != t0 - 1:
        raise DimensionError(
            "prefix has {} rows but origin {} needs {}".format(prefix.shape[0], t0, t0 - 1)
        )
    ensure_finite(prefix, "prefix")
    if horizon == 0:
        return ForecastDistribution(t0, np.zeros((M, 0, D)))

    trans_p = params.gru("transition")
    h = context.h0
    for x in prefix:
        h = transition(h, x, context.c, trans_p)

    streams = [rng.spawn(i) for i in range(M)]
    n_chunks = max(1, min(workers or 1, M))
    bounds = np.linspace(0, M, n_chunks + 1).astype(int)
    chunks = [streams[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    def run(chunk):
        return _rollout_chunk(h, prefix, context.c, chunk, horizon, params, sched, config)

    if n_chunks == 1:
        parts = [run(chunks[0])]
    else:
        pool = Pool(n_chunks)
        try:
            parts = pool.map(run, chunks)
        finally:
            pool.close()
            pool.join()
    logger.debug("Rolled out %s samples over %s steps from t0=%s", M, horizon, t0)
    return ForecastDistribution(t0, np.concatenate(parts, axis=0))
