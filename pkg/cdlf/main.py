import argparse
import logging
import os
import sys
from collections import OrderedDict
from multiprocessing import cpu_count

from cdlf.artifact import (
    load_model,
    render_ablation,
    render_stability,
    save_model,
    write_frame,
    write_json,
    write_metrics,
    write_quantile_bands,
    write_windows,
)
from cdlf.config import inherit_trained, load_run_config, write_resolved_config
from cdlf.context import select_references
from cdlf.diffusion import build_schedule
from cdlf.errors import (
    ArtifactError,
    ConfigurationError,
    DimensionError,
    EnforcementInfeasibleError,
    NonFiniteError,
    PanelValidationError,
    ReferenceLeakError,
    StepOutOfRangeError,
    TrainingDivergedError,
)
from cdlf.metrics import event_summaries, segment
from cdlf.monitoring import DefaultMonitoringProvider, configure_logging
from cdlf.numerics import RngStream
from cdlf.oracle import build_oracle, fit_decay_ratio, make_pulse, simulate, sweep_kappa
from cdlf.panel import (
    apply_normalization,
    generate_synthetic,
    load_panel,
    segment_episodes,
    write_panel,
)
from cdlf.protocol import (
    ProtocolSpec,
    ablate_conditioning,
    ablate_fusion,
    ablation_rows,
    check_leave_focal_out,
    forecast_window,
    prepare_split,
    run_protocol,
)
from cdlf.stability import enforce, lp_proxy, stability_report
from cdlf.training import leave_focal_out_references, observed_path_states, probe_pairs, train

logger = logging.getLogger("cdlf.main")
monitor = DefaultMonitoringProvider()

VALIDATION_ERRORS = (
    ConfigurationError,
    PanelValidationError,
    ArtifactError,
    DimensionError,
    StepOutOfRangeError,
)
RUNTIME_ERRORS = (
    TrainingDivergedError,
    EnforcementInfeasibleError,
    NonFiniteError,
    ReferenceLeakError,
)

MODEL_FILE = "model.avro"


def _out(args, name):
    return os.path.join(args.out, name)


def _prepare_panel(path, config, encoder=None):
    """Loads a panel, splits episodes when configured and normalizes it."""
    mode = "train" if encoder is None else "inference"
    dataset = load_panel(path, schema_mode=mode, encoder=encoder)
    if config.episode_min_len:
        dataset = segment_episodes(dataset, config.episode_min_len)
    return apply_normalization(dataset, config.normalization)


def gen_synthetic(args, config):
    dataset = generate_synthetic(
        config.synthetic_series,
        config.synthetic_length,
        config.seed,
        family=config.synthetic_family,
        noise=config.synthetic_noise,
    )
    path = _out(args, "panel.csv")
    write_panel(dataset, path)
    logger.info("Wrote %s synthetic series to %s", len(dataset), path)


def train_model(args, config):
    dataset = _prepare_panel(args.panel, config)
    train_ds, _ = prepare_split(dataset, config)
    params, log = train(train_ds, config, monitor=monitor)
    lineage = {"seed": config.seed, "steps": log.steps, "series": train_ds.ids}
    save_model(_out(args, MODEL_FILE), params, config, train_ds.encoder, lineage)
    write_json(log.to_dict(), _out(args, "training_log.json"))


def forecast(args, config):
    loaded = args.loaded
    params = loaded.params
    dataset = _prepare_panel(args.panel, config, loaded.encoder)
    library = dataset.library()
    if args.library:
        library = _prepare_panel(args.library, config, loaded.encoder).library()
    spec = ProtocolSpec.from_config(config)
    sched = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    wanted = set(args.series or dataset.ids)
    rng = RngStream(config.seed).spawn("forecast")

    distributions = []
    events = OrderedDict()
    for i, record in enumerate(dataset):
        if record.series_id not in wanted:
            continue
        selected = []
        if params.config.use_references:
            others = library.without(record.series_id)
            selected = select_references(record.descriptor, others, params.config.references_k)
            check_leave_focal_out(record.series_id, selected)
        if record.length < spec.t0 - 1:
            logger.warning("Series %s has fewer than t0-1 observations, skipped", record.series_id)
            continue
        horizon = spec.horizon or max(_library_length(library) - spec.t0 + 1, 1)
        with monitor.wrap("rollout", series=record.series_id):
            dist = forecast_window(
                params, params.config, sched, record, selected, spec.t0, horizon,
                spec.samples, rng.spawn(i), workers=config.workers,
            )
        distributions.append(dist)
        summary = event_summaries(dist, args.threshold)
        events[record.series_id] = summary

    write_quantile_bands(distributions, _out(args, "bands.csv"))
    labels = segment(OrderedDict((sid, e.launch) for sid, e in events.items()))
    write_json(
        OrderedDict(
            (
                sid,
                {
                    "segment": labels[sid],
                    "launch": dict(e.launch._asdict()),
                    "peak_lead_probs": e.peak_lead_probs,
                    "median_peak_lead": e.median_peak_lead,
                    "exceedance_prob": e.exceedance_prob,
                },
            )
            for sid, e in events.items()
        ),
        _out(args, "events.json"),
    )


def _library_length(library):
    return max((e.trajectory.shape[0] for e in library), default=0)


def evaluate(args, config):
    params = encoder = train_ids = None
    if args.loaded is not None:
        params, encoder = args.loaded.params, args.loaded.encoder
        train_ids = args.loaded.lineage.get("series")
    dataset = _prepare_panel(args.panel, config, encoder)
    result = run_protocol(
        dataset, config, params=params, encoder=encoder, monitor=monitor, train_ids=train_ids
    )
    extra = {"climatology_mcrps": result.climatology_mcrps, "mode": config.mode}
    if result.train_log is not None:
        extra["training"] = result.train_log.to_dict()
        save_model(
            _out(args, MODEL_FILE),
            result.params,
            config,
            result.encoder,
            {"seed": config.seed, "steps": result.train_log.steps, "series": result.train_ids},
        )
    write_metrics(result.report, _out(args, "metrics.json"), **extra)
    write_windows(result.scores, _out(args, "windows.csv"))
    write_quantile_bands(result.distributions, _out(args, "bands.csv"))


def _ablation(args, config, runner, title, name):
    dataset = _prepare_panel(args.panel, config)
    results = runner(dataset, config, monitor=monitor)
    for variant, result in results.items():
        write_metrics(
            result.report,
            _out(args, "metrics-{}.json".format(variant)),
            climatology_mcrps=result.climatology_mcrps,
            variant=variant,
        )
    rows = ablation_rows(results, config.horizon_bands, config.metric_scale)
    text = render_ablation(title, rows, config.horizon_bands)
    with open(_out(args, name), "w") as f:
        f.write(text)
    print(text)


def ablate_fusion_cmd(args, config):
    _ablation(args, config, ablate_fusion, "Similarity-weight fusion ablation", "ablation-fusion.txt")


def ablate_conditioning_cmd(args, config):
    _ablation(
        args, config, ablate_conditioning, "Conditioning ablation", "ablation-conditioning.txt"
    )


def stability_check(args, config):
    loaded = args.loaded
    params = loaded.params
    dataset = _prepare_panel(args.panel, config, loaded.encoder)
    model_config = params.config
    selected = leave_focal_out_references(dataset, model_config)
    records = list(dataset)[: config.stability_probe_series]
    states = observed_path_states(params, model_config, records, selected)

    lp, lp_source = config.lipschitz_p, "user"
    if args.lp_proxy:
        sched = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
        probes = probe_pairs(params, model_config, records, selected)
        lp = lp_proxy(
            params, model_config, sched, probes, config.lp_proxy_samples,
            RngStream(config.seed).spawn("lp-proxy"),
        )
        lp_source = "proxy"

    actions = []
    if args.enforce:
        report = stability_report(
            params.gru("transition"), states, lp, model_config.obs_dim, config.fd_step,
            config.gate_widening, lp_source, iters=config.power_iters, tol=config.power_tol,
        )
        p, actions = enforce(
            params.gru("transition"), config.target_kappa, lp, report.gates,
            obs_dims=model_config.obs_dim, iters=config.power_iters, tol=config.power_tol,
        )
        params.set_gru("transition", p)
        save_model(_out(args, MODEL_FILE), params, loaded.config, loaded.encoder, loaded.lineage)
        states = observed_path_states(params, model_config, records, selected)

    report = stability_report(
        params.gru("transition"), states, lp, model_config.obs_dim, config.fd_step,
        config.gate_widening, lp_source, actions, config.power_iters, config.power_tol,
    )
    write_json(report.to_dict(), _out(args, "stability.json"))
    print(render_stability(report))


def oracle_sim(args, config):
    sys_ = build_oracle(
        config.oracle_rho,
        config.oracle_lx,
        config.oracle_lp,
        config.oracle_eps_gen,
        config.oracle_eps_f,
        config.oracle_latent_dim,
        config.oracle_obs_dim,
        seed=config.seed,
        coupling=config.oracle_coupling,
    )
    pulse = None
    if config.oracle_pulse_time is not None:
        pulse = make_pulse(
            sys_, config.oracle_pulse_time, config.oracle_pulse_magnitude,
            config.oracle_pulse_direction,
        )
    with monitor.wrap("oracle-sim"):
        stats = simulate(
            sys_, config.oracle_horizon, config.oracle_rollouts, config.oracle_e0, pulse,
            config.seed, config.oracle_common_noise,
        )
    write_frame(stats.to_frame(), _out(args, "oracle.csv"))
    logger.info(
        "kappa=%.4g plateau=%.4g bound=%.4g max=%.4g",
        sys_.kappa, stats.plateau(), stats.bound, float(stats.delta_hat.max()),
    )
    if pulse is not None:
        logger.info(
            "Pulse excess decays by %.4g per step",
            fit_decay_ratio(stats.excess, pulse.time - 1),
        )


def kappa_sweep(args, config):
    base = {
        "rho": config.oracle_rho,
        "lp": config.oracle_lp,
        "eps_gen": config.oracle_eps_gen,
        "eps_f": config.oracle_eps_f,
        "e0": config.oracle_e0,
        "latent_dim": config.oracle_latent_dim,
        "obs_dim": config.oracle_obs_dim,
        "coupling": config.oracle_coupling,
    }
    with monitor.wrap("oracle-sim"):
        frame = sweep_kappa(
            config.kappa_grid, base, config.oracle_horizon, config.oracle_rollouts, config.seed
        )
    write_frame(frame, _out(args, "sweep.csv"))


@monitor.timer("full-run-time")
def run(args):
    overrides = {"seed": args.seed, "workers": args.num_processes}
    config = load_run_config(args.config, overrides)
    args.loaded = None
    if getattr(args, "model", None):
        args.loaded = load_model(args.model)
        config = inherit_trained(config, args.loaded.config)
    logger.info(
        "Detected %s CPUs available with %s threads requested",
        cpu_count(),
        config.workers or 1,
    )
    os.makedirs(args.out, exist_ok=True)
    write_resolved_config(config, args.out)
    args.func(args, config)


def _get_parser():
    parser = argparse.ArgumentParser(
        description="Conditional diffusion life-cycle forecaster"
    )
    parser.add_argument("-c", "--config", help="Path to a YAML run configuration")
    parser.add_argument("-s", "--seed", type=int, help="Overrides the configured seed")
    parser.add_argument("-o", "--out", default=".", help="Output directory")
    parser.add_argument("-ll", "--log-level", help="Name of a python log level eg DEBUG")
    parser.add_argument(
        "-np",
        "--num-processes",
        type=int,
        help="Number of worker threads for rollouts and evaluation windows.",
    )
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    cmd = sub.add_parser("gen-synthetic", help="Write a seeded synthetic panel")
    cmd.set_defaults(func=gen_synthetic)

    cmd = sub.add_parser("train", help="Train on the training split of a panel")
    cmd.add_argument("panel", help="Panel CSV")
    cmd.set_defaults(func=train_model)

    cmd = sub.add_parser("forecast", help="Sample forecasts for the series of a panel")
    cmd.add_argument("panel", help="Panel CSV with the series to forecast")
    cmd.add_argument("-m", "--model", required=True, help="Model artifact")
    cmd.add_argument("-l", "--library", help="Panel CSV of reference series")
    cmd.add_argument("--series", nargs="*", help="Only forecast these series ids")
    cmd.add_argument("--threshold", type=float, help="Exceedance threshold on the raw scale")
    cmd.set_defaults(func=forecast)

    cmd = sub.add_parser("evaluate", help="Run the rolling evaluation protocol")
    cmd.add_argument("panel", help="Panel CSV")
    cmd.add_argument("-m", "--model", help="Model artifact; trains one when omitted")
    cmd.set_defaults(func=evaluate)

    cmd = sub.add_parser("ablate-fusion", help="Compare the two fusion operations")
    cmd.add_argument("panel", help="Panel CSV")
    cmd.set_defaults(func=ablate_fusion_cmd)

    cmd = sub.add_parser("ablate-conditioning", help="Drop references or static descriptors")
    cmd.add_argument("panel", help="Panel CSV")
    cmd.set_defaults(func=ablate_conditioning_cmd)

    cmd = sub.add_parser("stability-check", help="Bounds and measurements of the transition")
    cmd.add_argument("panel", help="Panel CSV to probe the latent paths on")
    cmd.add_argument("-m", "--model", required=True, help="Model artifact")
    cmd.add_argument("--lp-proxy", action="store_true", help="Estimate L_P heuristically")
    cmd.add_argument(
        "--enforce", action="store_true", help="Shrink the transition weights to target_kappa"
    )
    cmd.set_defaults(func=stability_check)

    cmd = sub.add_parser("oracle-sim", help="Simulate the linear-Gaussian oracle")
    cmd.set_defaults(func=oracle_sim)

    cmd = sub.add_parser("kappa-sweep", help="Oracle plateaus over kappa_grid")
    cmd.set_defaults(func=kappa_sweep)
    return parser


def main(argv=None):
    args = _get_parser().parse_args(argv)

    configure_logging(args)
    logger.info("Running cdlf %s", args.command)
    try:
        run(args)
    except VALIDATION_ERRORS as e:
        logger.error("%s", e)
        sys.exit(1)
    except RUNTIME_ERRORS as e:
        logger.error("%s", e)
        sys.exit(2)
    except Exception:
        logger.exception("Unexpected error")
        raise
    logger.info("Shutting down")


if __name__ == "__main__":
    main()
