"""Joint training of the context encoders, the latent transition and the
score network on the denoising objective, with periodic contraction checks
on the transition cell."""
import logging
from collections import OrderedDict

import numpy as np

from cdlf.context import build_context, select_references
from cdlf.diffusion import build_schedule
from cdlf.errors import (
    DimensionError,
    EnforcementInfeasibleError,
    NonFiniteError,
    TrainingDivergedError,
)
from cdlf.model import ModelConfig, ModelParameters, TrainingInstance, loss_and_grads
from cdlf.monitoring import MonitoringProvider
from cdlf.numerics import (
    OptimizerState,
    RngStream,
    clip_global_norm,
    gru_forward,
    optimizer_step,
)
from cdlf.stability import enforce, measure_empirical

logger = logging.getLogger("cdlf.training")


class TrainingLog(object):
    """What happened during one call to :func:`train`.

    ``stopped`` is ``"budget"`` or ``"plateau"``. ``checks`` holds one dict
    per stability check.
    """

    def __init__(self):
        self.steps = 0
        self.losses = []
        self.stopped = "budget"
        self.checks = []
        self.reinits = 0
        self.nonfinite_steps = 0
        self.learning_rate = None
        self.init_digest = None

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else None

    def to_dict(self):
        return {
            "steps": self.steps,
            "final_loss": self.final_loss,
            "stopped": self.stopped,
            "reinits": self.reinits,
            "nonfinite_steps": self.nonfinite_steps,
            "learning_rate": self.learning_rate,
            "init_digest": self.init_digest,
            "checks": self.checks,
        }


def leave_focal_out_references(dataset, model_config):
    """Selected references of every series, drawn from the rest of the
    library. Empty lists when references are disabled."""
    selected = OrderedDict()
    library = dataset.library()
    for record in dataset:
        if not model_config.use_references:
            selected[record.series_id] = []
            continue
        others = library.without(record.series_id)
        selected[record.series_id] = select_references(
            record.descriptor, others, model_config.references_k
        )
    return selected


def observed_path_states(params, model_config, records, selected):
    """``(h, [x; c])`` pairs visited by the transition cell when it is fed
    the observed trajectories of ``records``."""
    trans_p = params.gru("transition")
    states = []
    for record in records:
        ctx = build_context(record.descriptor, selected[record.series_id], params, model_config)
        h = ctx.h0
        for x in record.values:
            x_in = np.concatenate([x, ctx.c])
            states.append((h, x_in))
            h, _ = gru_forward(h, x_in, trans_p)
    return states


def _sample_batch(records, selected, size, steps, rng):
    batch = []
    for _ in range(size):
        record = records[int(rng.integers(0, len(records)))]
        t0 = int(rng.integers(1, record.length + 1))
        n = int(rng.integers(1, steps + 1))
        noise = rng.normal(record.values.shape[1])
        batch.append(
            TrainingInstance(
                record.descriptor, selected[record.series_id], record.values, t0, n, noise
            )
        )
    return batch


class _StabilityHook(object):
    """Measures, enforces and if needed re-initializes the transition cell."""

    def __init__(self, config, model_config, records, selected, rng, monitor):
        self.config = config
        self.model_config = model_config
        self.selected = selected
        self.rng = rng
        self.monitor = monitor
        self.strikes = 0
        count = min(config.stability_probe_series, len(records))
        order = rng.spawn("probes").permutation(len(records))[:count]
        self.probes = [records[i] for i in sorted(order)]

    def measure(self, params):
        states = observed_path_states(params, self.model_config, self.probes, self.selected)
        return measure_empirical(
            params.gru("transition"),
            states,
            self.config.fd_step,
            self.model_config.obs_dim,
            self.config.power_iters,
            self.config.power_tol,
        )

    def __call__(self, params, optimizer, step, log):
        config = self.config
        measured = self.measure(params)
        entry = OrderedDict(
            [("step", step), ("rho_hat", measured.rho_hat), ("lx_hat", measured.lx_hat)]
        )
        self.strikes = self.strikes + 1 if measured.rho_hat > config.reinit_threshold else 0
        if self.strikes >= config.reinit_patience:
            self.reinitialize(params, optimizer, step, log)
            measured = self.measure(params)
            entry["reinit"] = True

        if config.stability_enforce:
            gates = measured.gates.widen(config.gate_widening)
            try:
                p, actions = enforce(
                    params.gru("transition"),
                    config.target_kappa,
                    config.lipschitz_p,
                    gates,
                    obs_dims=self.model_config.obs_dim,
                    iters=config.power_iters,
                    tol=config.power_tol,
                )
            except EnforcementInfeasibleError as ex:
                logger.warning("Stability enforcement infeasible at step %s: %s", step, ex)
                self.reinitialize(params, optimizer, step, log)
                entry["infeasible"] = True
            else:
                if actions:
                    params.set_gru("transition", p)
                    entry["actions"] = [dict(a._asdict()) for a in actions]
                    self.monitor.record_event("stability-enforce", step=step)
        log.checks.append(entry)

    def reinitialize(self, params, optimizer, step, log):
        stream = self.rng.spawn("reinit").spawn(log.reinits)
        names = params.reinitialize_group("transition", stream)
        optimizer.reset(names)
        log.reinits += 1
        self.strikes = 0
        logger.warning("Re-initialized the transition cell at step %s", step)
        self.monitor.record_event("stability-reinit", step=step)


def train(dataset, config, seed=None, monitor=None, params=None):
    """Fits a model on ``dataset`` and returns ``(params, log)``.

    Each step draws ``batch_size`` instances: a series uniformly, a
    position ``t0`` uniformly within it, a diffusion step and a noise draw.
    Every series is conditioned on references chosen from the other series
    only. ``params`` resumes from existing parameters.
    """
    if not len(dataset):
        raise DimensionError("cannot train on an empty panel")
    monitor = monitor or MonitoringProvider()
    seed = config.seed if seed is None else seed
    rng = RngStream(seed)
    model_config = ModelConfig.from_run_config(config, dataset.obs_dim, dataset.encoder.dim)
    sched = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    if params is None:
        params = ModelParameters.initialize(model_config, rng.spawn("init"))
        log_digest = params.digest(exclude_prefixes=("fusion.",))
    else:
        log_digest = None
    records = list(dataset)
    selected = leave_focal_out_references(dataset, model_config)

    optimizer = OptimizerState(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    hook = _StabilityHook(config, model_config, records, selected, rng.spawn("stability"), monitor)
    batches = rng.spawn("train-batches")
    log = TrainingLog()
    log.init_digest = log_digest

    last_finite = None
    streak = 0
    window = []
    previous_window = None

    logger.info(
        "Training on %s series for at most %s steps (seed %s)",
        len(records), config.max_steps, seed,
    )
    with monitor.wrap("train"):
        for step in range(1, config.max_steps + 1):
            batch = _sample_batch(records, selected, config.batch_size, sched.steps, batches)
            try:
                loss, grads = loss_and_grads(params, batch, sched, model_config)
                clip_global_norm(grads, config.grad_clip)
                optimizer_step(params, grads, optimizer)
            except NonFiniteError as ex:
                streak += 1
                log.nonfinite_steps += 1
                optimizer.learning_rate *= 0.5
                logger.warning(
                    "Non-finite step %s (%s); learning rate lowered to %g",
                    step, ex, optimizer.learning_rate,
                )
                if streak > config.nonfinite_limit:
                    logger.error("Aborting training at step %s", step)
                    raise TrainingDivergedError(step, last_finite)
                continue
            streak = 0
            last_finite = loss
            log.losses.append(loss)
            log.steps = step

            if step % config.log_interval == 0:
                logger.info("Step %s loss %.6g", step, loss)
                monitor.record_event("train-checkpoint", step=step, loss=loss)
            if step % config.stability_interval == 0:
                hook(params, optimizer, step, log)

            window.append(loss)
            if len(window) == config.plateau_steps:
                mean = float(np.mean(window))
                window = []
                if previous_window is not None and (
                    previous_window - mean < config.plateau_tolerance * abs(previous_window)
                ):
                    log.stopped = "plateau"
                    logger.info("Loss plateaued at step %s (mean %.6g)", step, mean)
                    break
                previous_window = mean

    log.learning_rate = optimizer.learning_rate
    logger.info("Training finished after %s steps, final loss %s", log.steps, log.final_loss)
    return params, log


def probe_pairs(params, model_config, records, selected):
    """``(h_t, h_{t+1}, x_{1:t})`` triples along the observation-driven latent
    paths of ``records``, for :func:`cdlf.stability.lp_proxy`."""
    states = observed_path_states(params, model_config, records, selected)
    trans_p = params.gru("transition")
    pairs = []
    offset = 0
    for record in records:
        for t in range(record.length):
            h, x_in = states[offset + t]
            h_next, _ = gru_forward(h, x_in, trans_p)
            pairs.append((h, h_next, record.values[:t]))
        offset += record.length
    return pairs
