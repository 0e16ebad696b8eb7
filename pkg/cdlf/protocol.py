"""Rolling cold-start evaluation: train/test split, forecast windows,
scoring against a climatology baseline and the ablation harnesses."""
import logging
from collections import OrderedDict, namedtuple
from multiprocessing.dummy import Pool

import numpy as np

from cdlf.context import DescriptorEncoder, build_context, select_references
from cdlf.diffusion import build_schedule, rollout
from cdlf.errors import ConfigurationError, DimensionError, ReferenceLeakError
from cdlf.metrics import MetricReport, crps, score_window
from cdlf.monitoring import MonitoringProvider
from cdlf.numerics import RngStream
from cdlf.training import train

logger = logging.getLogger("cdlf.protocol")

MODES = ("pre-launch", "post-launch")
FUSION_VARIANTS = OrderedDict([("multiplicative", "A"), ("concat", "B")])
CONDITIONING_VARIANTS = OrderedDict(
    [
        ("full", {}),
        ("no-references", {"use_references": False}),
        ("no-static", {"use_static": False}),
    ]
)


class ProtocolSpec(
    namedtuple("ProtocolSpec", ["mode", "t0", "horizon", "samples", "stride", "train_fraction"])
):
    """How forecast windows are cut from each test series.

    ``t0`` is the 1-based first forecast position, so ``t0 - 1`` observed
    steps condition the forecast. ``horizon`` is the number of forecast
    steps; ``None`` forecasts through the end of each series. Pre-launch
    forecasts always start at ``t0 = 1``.
    """

    __slots__ = ()

    @classmethod
    def from_config(cls, config):
        t0 = 1 if config.mode == "pre-launch" else config.t0
        return cls(
            mode=config.mode,
            t0=t0,
            horizon=config.horizon,
            samples=config.samples,
            stride=config.stride,
            train_fraction=config.train_fraction,
        ).validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(
                "must be one of {}, got {!r}".format(", ".join(MODES), self.mode), key="mode"
            )
        if self.mode == "pre-launch" and self.t0 != 1:
            raise ConfigurationError("pre-launch forecasts start at t0=1", key="t0")
        if self.t0 < 1:
            raise ConfigurationError("must be at least 1", key="t0")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigurationError("must be at least 1", key="horizon")
        if self.samples < 1 or self.stride < 1:
            raise ConfigurationError("samples and stride must be at least 1", key="samples")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("must lie in (0, 1)", key="train_fraction")
        return self


def split_series(ids, fraction, rng):
    """Seeded split of series ids into ``(train, test)``, both keeping the
    input order. At least one series lands on each side when possible."""
    ids = list(ids)
    n = len(ids)
    n_train = int(round(fraction * n))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    chosen = set(int(i) for i in rng.permutation(n)[:n_train])
    train_ids = [sid for i, sid in enumerate(ids) if i in chosen]
    test_ids = [sid for i, sid in enumerate(ids) if i not in chosen]
    return train_ids, test_ids


def window_origins(length, spec):
    """``(origin, horizon)`` pairs for a series of ``length`` steps.

    Pre-launch yields one window from ``t = 1``. Post-launch rolls the
    origin forward from ``t0`` by ``stride`` while the window fits.
    """
    if spec.mode == "pre-launch":
        return [(1, min(spec.horizon or length, length))] if length else []
    if spec.horizon is None:
        return [(spec.t0, length - spec.t0 + 1)] if spec.t0 <= length else []
    last = length - spec.horizon + 1
    return [(o, spec.horizon) for o in range(spec.t0, last + 1, spec.stride)]


def climatology_baseline(train_dataset, origin, horizon):
    """Per-lead samples of the cross-sectional distribution of training
    series at the same absolute time index.

    Returns a list of ``n_l x D`` arrays, one per lead. Indices no training
    series reaches reuse the last index any series reaches.
    """
    max_len = train_dataset.max_length
    if max_len == 0:
        raise DimensionError("climatology needs at least one training series")
    out = []
    for lead in range(horizon):
        t = min(origin + lead, max_len)
        out.append(np.stack([s.values[t - 1] for s in train_dataset if s.length >= t]))
    return out


def climatology_crps(per_lead, actual):
    """CRPS per lead of the ragged climatology samples, summed over dims."""
    actual = np.asarray(actual, dtype=np.float64)
    return np.array([float(np.sum(crps(s, a))) for s, a in zip(per_lead, actual)])


def forecast_window(
    params, model_config, sched, record, selected, origin, horizon, samples, rng, workers=None
):
    """Sampled forecast of ``record`` from ``origin`` for ``horizon`` steps."""
    ctx = build_context(record.descriptor, selected, params, model_config)
    prefix = record.values[: origin - 1]
    dist = rollout(
        ctx, prefix, origin, horizon, samples, params, sched, rng, model_config, workers=workers
    )
    dist.inverse = record.meta
    dist.series_id = record.series_id
    return dist


def check_leave_focal_out(series_id, selected):
    leaked = [r.entry.series_id for r in selected if r.entry.series_id == series_id]
    if leaked:
        raise ReferenceLeakError("series {} appears in its own reference set".format(series_id))


ProtocolResult = namedtuple(
    "ProtocolResult",
    [
        "report",
        "climatology_mcrps",
        "scores",
        "distributions",
        "params",
        "train_log",
        "encoder",
        "train_ids",
        "test_ids",
    ],
)


def prepare_split(dataset, config, encoder=None, train_ids=None):
    """Train and test panels; the descriptor encoder is refit on the training
    series unless one is supplied.

    ``train_ids`` pins the training series, e.g. to those a loaded model was
    trained on; every other series of ``dataset`` is held out.
    """
    if train_ids is None:
        spec = ProtocolSpec.from_config(config)
        train_ids, test_ids = split_series(
            dataset.ids, spec.train_fraction, RngStream(config.seed).spawn("split")
        )
    else:
        pinned = set(train_ids)
        train_ids = [sid for sid in dataset.ids if sid in pinned]
        test_ids = [sid for sid in dataset.ids if sid not in pinned]
    train_ds = dataset.subset(train_ids)
    if encoder is None:
        encoder = DescriptorEncoder.fit(s.raw_descriptor for s in train_ds)
    return train_ds.with_encoder(encoder), dataset.subset(test_ids).with_encoder(encoder)


def run_protocol(
    dataset, config, params=None, encoder=None, monitor=None, variant=None, train_ids=None
):
    """Trains (unless ``params`` is given) and scores every forecast window
    of the held-out series.

    Window ``(i, origin)`` of test series ``i`` draws from a stream keyed by
    ``i`` and ``origin`` only, so a post-launch run with ``t0 = 1`` and a
    pre-launch run sample identical paths. ``train_ids`` is passed on to
    :func:`prepare_split`.
    """
    monitor = monitor or MonitoringProvider()
    spec = ProtocolSpec.from_config(config)
    train_ds, test_ds = prepare_split(dataset, config, encoder, train_ids)
    if not len(train_ds) or not len(test_ds):
        raise DimensionError(
            "need training and test series, got {} and {}".format(len(train_ds), len(test_ds))
        )
    train_log = None
    if params is None:
        params, train_log = train(train_ds, config, monitor=monitor)
    model_config = params.config
    sched = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    library = train_ds.library()
    rng = RngStream(config.seed).spawn("evaluate")

    jobs = []
    for i, record in enumerate(test_ds):
        origins = window_origins(record.length, spec)
        if not origins:
            logger.warning("Series %s is too short for any window", record.series_id)
            continue
        selected = []
        if model_config.use_references:
            selected = select_references(record.descriptor, library, model_config.references_k)
            check_leave_focal_out(record.series_id, selected)
        for origin, horizon in origins:
            jobs.append((i, record, selected, origin, horizon))
    if not jobs:
        raise DimensionError("no forecast windows fit the test series")

    def run_window(job):
        i, record, selected, origin, horizon = job
        series_logger = logging.getLogger("cdlf.protocol.{}".format(record.series_id))
        dist = forecast_window(
            params, model_config, sched, record, selected, origin, horizon, spec.samples,
            rng.spawn(i).spawn(origin),
        )
        actual = record.values[origin - 1 : origin - 1 + horizon]
        score = score_window(dist, actual, record.meta)
        clim = climatology_crps(climatology_baseline(train_ds, origin, horizon), actual)
        series_logger.debug("Window at t0=%s scored, MCRPS %.4g", origin, float(score.crps.mean()))
        monitor.record_event("evaluate-window", series=record.series_id, variant=variant)
        return score, dist, clim

    logger.info("Evaluating %s windows over %s test series", len(jobs), len(test_ds))
    with monitor.wrap("evaluate", variant=variant):
        workers = config.workers or 1
        if workers == 1:
            results = [run_window(job) for job in jobs]
        else:
            pool = Pool(workers)
            try:
                results = pool.map(run_window, jobs)
            finally:
                pool.close()
                pool.join()

    scores = [r[0] for r in results]
    report = MetricReport.from_windows(scores, config.horizon_bands)
    clim_mcrps = float(np.concatenate([r[2] for r in results]).mean())
    logger.info("MCRPS %.4g (climatology %.4g)", report.mcrps, clim_mcrps)
    return ProtocolResult(
        report=report,
        climatology_mcrps=clim_mcrps,
        scores=scores,
        distributions=[r[1] for r in results],
        params=params,
        train_log=train_log,
        encoder=train_ds.encoder,
        train_ids=train_ds.ids,
        test_ids=test_ds.ids,
    )


def _run_variants(dataset, config, variants, monitor):
    results = OrderedDict()
    for name, changes in variants.items():
        logger.info("Running variant %s", name)
        results[name] = run_protocol(
            dataset, config.replace(**changes), monitor=monitor, variant=name
        )
    return results


def ablate_fusion(dataset, config, monitor=None):
    """Multiplicative scaling (A) against concatenation plus projection (B),
    trained and scored under one seed and one split."""
    variants = OrderedDict((name, {"fusion": name}) for name in FUSION_VARIANTS)
    return _run_variants(dataset, config, variants, monitor)


def ablate_conditioning(dataset, config, monitor=None):
    """Full context against the context without references and without
    static descriptors."""
    return _run_variants(dataset, config, CONDITIONING_VARIANTS, monitor)


def ablation_rows(results, bands, scale=1.0):
    """Table rows for :func:`cdlf.artifact.render_ablation`."""
    rows = []
    for name, result in results.items():
        report = result.report
        band_cells = []
        for lo, hi in bands:
            stats = report.bands.get("{}-{}".format(lo, hi), {})
            band_cells.append(
                {
                    "label": "{}-{}".format(lo, hi),
                    "mae": _scaled(stats.get("mae"), scale),
                    "mcrps": _scaled(stats.get("mcrps"), scale),
                }
            )
        rows.append(
            {
                "variant": name,
                "tag": FUSION_VARIANTS.get(name, ""),
                "mae": _scaled(report.mae, scale),
                "rmse": _scaled(report.rmse, scale),
                "mcrps": _scaled(report.mcrps, scale),
                "dtw": _scaled(report.dtw, scale),
                "climatology_mcrps": _scaled(result.climatology_mcrps, scale),
                "bands": band_cells,
                "init_digest": result.train_log.init_digest if result.train_log else None,
            }
        )
    return rows


def _scaled(value, scale):
    return None if value is None else value * scale
