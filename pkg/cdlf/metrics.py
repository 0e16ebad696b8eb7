"""Forecast-quality metrics.

Quantiles use linear interpolation between order statistics: for ``M``
sorted samples the level-``u`` quantile sits at rank ``(M - 1) u + 1``.
CRPS is approximated by the mean pinball loss over the levels
``u_j = j / 100``, ``j = 1..99``.
"""
import logging
from collections import OrderedDict, namedtuple

import numpy as np

from cdlf.errors import DimensionError

logger = logging.getLogger("cdlf.metrics")

LEVELS = np.arange(1, 100) / 100.0
SEGMENTS = ("HP-HR", "HP-LR", "LP-HR", "LP-LR")


def _samples(samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise DimensionError("no samples")
    return samples


def empirical_quantile(samples, u):
    """Level-``u`` quantile along the first axis."""
    samples = _samples(samples)
    if np.any(np.asarray(u) <= 0) or np.any(np.asarray(u) >= 1):
        raise DimensionError("quantile level must lie in (0, 1), got {}".format(u))
    return np.quantile(samples, u, axis=0, method="linear")


def pinball(x_true, x_hat, u):
    diff = np.asarray(x_true, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)
    return np.where(diff >= 0, u * diff, (u - 1.0) * diff)


def pinball_curve(samples, x_true, levels=LEVELS):
    """Pinball loss at each level's empirical quantile; shape
    ``(len(levels),) + x_true.shape``."""
    q = empirical_quantile(samples, levels)
    u = np.reshape(levels, (-1,) + (1,) * (q.ndim - 1))
    return pinball(x_true, q, u)


def crps(samples, x_true, levels=LEVELS):
    """99-level quantile approximation of the CRPS along the first axis."""
    return pinball_curve(samples, x_true, levels).mean(axis=0)


def median_forecast(samples):
    return np.median(_samples(samples), axis=0)


def mae(forecast, actual):
    return float(np.mean(np.abs(np.asarray(forecast) - np.asarray(actual))))


def rmse(forecast, actual):
    return float(np.sqrt(np.mean((np.asarray(forecast) - np.asarray(actual)) ** 2)))


def dtw(a, b):
    """Unconstrained dynamic time warping with absolute-difference cost.

    Both ends are matched; the distance is the summed cost along the best
    path. Multivariate rows use the L1 norm.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DimensionError("dtw needs non-empty series")
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    cost = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def _raw(path, inverse):
    path = np.asarray(path, dtype=np.float64)
    return path if inverse is None else inverse.invert(path)


def peak_error(forecast_path, actual, inverse=None):
    """``|max forecast - max actual|`` on the raw scale."""
    return float(abs(np.max(_raw(forecast_path, inverse)) - np.max(_raw(actual, inverse))))


def auc_error(forecast_path, actual, inverse=None):
    return float(abs(np.sum(_raw(forecast_path, inverse)) - np.sum(_raw(actual, inverse))))


LaunchSummary = namedtuple("LaunchSummary", ["p50_auc", "p90_peak", "auc_bandwidth"])


def launch_summaries(dist):
    """Median cumulative adoption, upper-decile peak and the P90-P10 spread of
    cumulative adoption across rollouts, all on the raw scale."""
    raw = dist.raw_samples().sum(axis=2)
    auc = raw.sum(axis=1)
    peak = raw.max(axis=1) if raw.shape[1] else np.zeros(dist.num_samples)
    p10, p50, p90 = np.quantile(auc, [0.1, 0.5, 0.9])
    return LaunchSummary(float(p50), float(np.quantile(peak, 0.9)), float(p90 - p10))


def segment(summaries):
    """Quadrant labels on the potential-risk plane.

    Potential is ``p50_auc``, risk is ``auc_bandwidth``; each is split at its
    median across series, values equal to the median counting as low.
    ``summaries`` maps series ids to :class:`LaunchSummary`.
    """
    if not summaries:
        return OrderedDict()
    ids = list(summaries)
    potential = np.array([summaries[i].p50_auc for i in ids])
    risk = np.array([summaries[i].auc_bandwidth for i in ids])
    p_med, r_med = np.median(potential), np.median(risk)
    labels = OrderedDict()
    for sid, p, r in zip(ids, potential, risk):
        labels[sid] = "{}-{}".format("HP" if p > p_med else "LP", "HR" if r > r_med else "LR")
    return labels


EventSummary = namedtuple(
    "EventSummary", ["peak_lead_probs", "median_peak_lead", "exceedance_prob", "launch"]
)


def event_summaries(dist, threshold=None):
    """Peak-timing distribution (1-based lead of each rollout's maximum) and
    the probability that a rollout exceeds ``threshold`` at least once."""
    if dist.horizon == 0:
        return EventSummary(np.zeros(0), None, 0.0, launch_summaries(dist))
    raw = dist.raw_samples().sum(axis=2)
    leads = np.argmax(raw, axis=1) + 1
    probs = np.bincount(leads, minlength=dist.horizon + 1)[1:] / float(dist.num_samples)
    exceed = 0.0
    if threshold is not None:
        exceed = float(np.mean(np.any(raw > threshold, axis=1)))
    return EventSummary(probs, float(np.median(leads)), exceed, launch_summaries(dist))


WindowScore = namedtuple(
    "WindowScore",
    [
        "series_id",
        "origin",
        "abs_errors",
        "sq_errors",
        "crps",
        "pinball",
        "dtw",
        "peak_error",
        "auc_error",
    ],
)


def score_window(dist, actual, inverse=None):
    """Scores one forecast window against the realized path on the
    normalized scale (peak and AUC errors on the raw scale)."""
    actual = np.asarray(actual, dtype=np.float64).reshape(dist.horizon, -1)
    med = dist.median_path()
    curve = pinball_curve(dist.samples, actual)
    return WindowScore(
        series_id=dist.series_id,
        origin=dist.origin,
        abs_errors=np.abs(med - actual).sum(axis=1),
        sq_errors=((med - actual) ** 2).sum(axis=1),
        crps=curve.mean(axis=0).sum(axis=1),
        pinball=curve.sum(axis=2),
        dtw=dtw(med, actual),
        peak_error=peak_error(med, actual, inverse),
        auc_error=auc_error(med, actual, inverse),
    )


class MetricReport(object):
    """Aggregate of window scores.

    ``pinball_curve`` is the mean pinball loss per level; its mean equals
    ``mcrps``. ``bands`` maps ``"lo-hi"`` lead ranges to MAE/MCRPS.
    """

    def __init__(
        self, mae, rmse, mcrps, dtw, peak_error, auc_error, pinball_curve, bands, windows
    ):
        self.mae = mae
        self.rmse = rmse
        self.mcrps = mcrps
        self.dtw = dtw
        self.peak_error = peak_error
        self.auc_error = auc_error
        self.pinball_curve = pinball_curve
        self.bands = bands
        self.windows = windows

    @classmethod
    def from_windows(cls, scores, bands=()):
        scores = list(scores)
        if not scores:
            raise DimensionError("no scored windows")
        abs_err = np.concatenate([s.abs_errors for s in scores])
        sq_err = np.concatenate([s.sq_errors for s in scores])
        crps_all = np.concatenate([s.crps for s in scores])
        curve = np.concatenate([s.pinball for s in scores], axis=1).mean(axis=1)
        band_stats = OrderedDict()
        for lo, hi in bands:
            sel_abs, sel_crps = [], []
            for s in scores:
                lead = np.arange(1, len(s.abs_errors) + 1)
                mask = (lead >= lo) & (lead <= hi)
                sel_abs.append(s.abs_errors[mask])
                sel_crps.append(s.crps[mask])
            sel_abs = np.concatenate(sel_abs)
            sel_crps = np.concatenate(sel_crps)
            band_stats["{}-{}".format(lo, hi)] = {
                "mae": float(sel_abs.mean()) if sel_abs.size else None,
                "mcrps": float(sel_crps.mean()) if sel_crps.size else None,
                "count": int(sel_abs.size),
            }
        return cls(
            mae=float(abs_err.mean()),
            rmse=float(np.sqrt(sq_err.mean())),
            mcrps=float(crps_all.mean()),
            dtw=float(np.mean([s.dtw for s in scores])),
            peak_error=float(np.mean([s.peak_error for s in scores])),
            auc_error=float(np.mean([s.auc_error for s in scores])),
            pinball_curve=curve,
            bands=band_stats,
            windows=len(scores),
        )

    def to_dict(self):
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mcrps": self.mcrps,
            "dtw": self.dtw,
            "peak_error": self.peak_error,
            "auc_error": self.auc_error,
            "pinball_curve": [float(v) for v in self.pinball_curve],
            "bands": self.bands,
            "windows": self.windows,
        }


def window_row(score):
    """Flat CSV row for one scored window."""
    return OrderedDict(
        [
            ("series_id", score.series_id),
            ("origin", score.origin),
            ("horizon", len(score.abs_errors)),
            ("mae", float(score.abs_errors.mean())),
            ("rmse", float(np.sqrt(score.sq_errors.mean()))),
            ("mcrps", float(score.crps.mean())),
            ("dtw", score.dtw),
            ("peak_error", score.peak_error),
            ("auc_error", score.auc_error),
        ]
    )
