"""Panel data: CSV ingestion, normalization transforms and a synthetic
generator.

The panel CSV has the header ``series_id,t,value`` followed by any number
of ``desc_*`` descriptor columns. Descriptor values repeat on every row of a
series and must agree within it.
"""
import logging
from collections import OrderedDict

import numpy as np
import pandas as pd

from cdlf.context import DescriptorEncoder, ReferenceEntry, ReferenceLibrary
from cdlf.errors import ConfigurationError, PanelValidationError
from cdlf.numerics import RngStream

logger = logging.getLogger("cdlf.panel")

REQUIRED_COLUMNS = ("series_id", "t", "value")
DESCRIPTOR_PREFIX = "desc_"
SCHEMA_MODES = ("train", "inference")
FAMILIES = ("bass", "persistent")

# Bass innovation/imitation coefficients per synthetic category
_CATEGORY_CURVES = OrderedDict(
    [("A", (0.03, 0.60)), ("B", (0.01, 0.35)), ("C", (0.06, 0.90))]
)


class TransformMeta(object):
    """Inverts a normalization on stored per-series metadata.

    ``kind`` is ``"none"``, ``"max"`` (values were divided by ``scale``) or
    ``"log_increment"`` (values are ``log(1 + increment)``; inversion gives
    increments).
    """

    def __init__(self, kind="none", scale=1.0):
        self.kind = kind
        self.scale = scale

    def invert(self, values):
        values = np.asarray(values, dtype=np.float64)
        if self.kind == "max":
            return values * self.scale
        if self.kind == "log_increment":
            return np.expm1(values)
        return values

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale}

    def __eq__(self, other):
        return isinstance(other, TransformMeta) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "TransformMeta({!r}, scale={})".format(self.kind, self.scale)


class SeriesRecord(object):
    """One life-cycle series.

    ``times`` are the integer time indices, ``raw_values`` the values as
    read, ``values`` the (possibly transformed) trajectory as a T x 1 matrix
    and ``meta`` the inverse-transform metadata.
    """

    def __init__(
        self, series_id, times, raw_values, raw_descriptor, values=None, meta=None, descriptor=None
    ):
        self.series_id = series_id
        self.times = np.asarray(times, dtype=np.int64)
        self.raw_values = np.asarray(raw_values, dtype=np.float64)
        self.raw_descriptor = dict(raw_descriptor)
        if values is None:
            values = self.raw_values.reshape(-1, 1)
        self.values = np.asarray(values, dtype=np.float64)
        self.meta = meta or TransformMeta()
        self.descriptor = descriptor

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def launch_time(self):
        return int(self.times[0]) if self.times.size else None

    def replace(self, **changes):
        fields = dict(
            series_id=self.series_id,
            times=self.times,
            raw_values=self.raw_values,
            raw_descriptor=self.raw_descriptor,
            values=self.values,
            meta=self.meta,
            descriptor=self.descriptor,
        )
        fields.update(changes)
        return SeriesRecord(**fields)

    def __repr__(self):
        return "SeriesRecord({!r}, T={})".format(self.series_id, self.length)


class PanelDataset(object):
    """Series records plus the descriptor encoder used to standardize them."""

    def __init__(self, series, encoder=None, normalization="none"):
        series = list(series)
        if encoder is None:
            encoder = DescriptorEncoder.fit(s.raw_descriptor for s in series)
        self.encoder = encoder
        self.normalization = normalization
        self.series = [s.replace(descriptor=encoder.encode(s.raw_descriptor)) for s in series]

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def ids(self):
        return [s.series_id for s in self.series]

    def get(self, series_id):
        for s in self.series:
            if s.series_id == series_id:
                return s
        raise KeyError(series_id)

    def subset(self, ids):
        wanted = set(ids)
        return PanelDataset(
            (s for s in self.series if s.series_id in wanted), self.encoder, self.normalization
        )

    def with_encoder(self, encoder):
        return PanelDataset(self.series, encoder, self.normalization)

    def with_series(self, series, normalization=None):
        return PanelDataset(series, self.encoder, normalization or self.normalization)

    def library(self):
        return ReferenceLibrary(
            ReferenceEntry(s.series_id, s.values, s.descriptor) for s in self.series
        )

    @property
    def obs_dim(self):
        return self.series[0].values.shape[1] if self.series else 1

    @property
    def max_length(self):
        return max((s.length for s in self.series), default=0)


def _rows(index):
    # pandas index -> 1-based file line numbers (header is line 1)
    return [int(i) + 2 for i in index]


def load_panel(path, schema_mode="train", encoder=None):
    """Reads and validates a panel CSV.

    In ``"train"`` mode the descriptor encoder is fitted on the file; in
    ``"inference"`` mode ``encoder`` (from a trained model) is required.
    """
    if schema_mode not in SCHEMA_MODES:
        raise ConfigurationError("must be train or inference", key="schema_mode")
    if schema_mode == "inference" and encoder is None:
        raise ConfigurationError(
            "inference mode needs the model's descriptor encoder", key="encoder"
        )

    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise PanelValidationError("missing columns: {}".format(", ".join(missing)), rows=[1])
    desc_cols = [c for c in frame.columns if c.startswith(DESCRIPTOR_PREFIX)]
    unknown = [c for c in frame.columns if c not in REQUIRED_COLUMNS and c not in desc_cols]
    if unknown:
        raise PanelValidationError("unexpected columns: {}".format(", ".join(unknown)), rows=[1])

    times = pd.to_numeric(frame["t"], errors="coerce")
    bad = frame.index[times.isna() | (times != times.round())]
    if len(bad):
        raise PanelValidationError("non-integer time index", rows=_rows(bad))
    values = pd.to_numeric(frame["value"], errors="coerce")
    bad = frame.index[values.isna() | ~np.isfinite(values.fillna(0.0))]
    if len(bad):
        raise PanelValidationError("non-numeric value", rows=_rows(bad))
    empty_id = frame.index[frame["series_id"].str.strip() == ""]
    if len(empty_id):
        raise PanelValidationError("empty series_id", rows=_rows(empty_id))
    frame = frame.assign(t=times.astype(np.int64), value=values.astype(np.float64))

    dup = frame.index[frame.duplicated(["series_id", "t"], keep="first")]
    if len(dup):
        raise PanelValidationError("duplicate (series_id, t) rows", rows=_rows(dup))

    records = []
    inconsistent = []
    for series_id, group in frame.groupby("series_id", sort=False):
        descriptor = {}
        for col in desc_cols:
            distinct = group[col].unique()
            if len(distinct) > 1:
                inconsistent.extend(_rows(group.index[group[col] != distinct[0]]))
            raw = distinct[0]
            descriptor[col[len(DESCRIPTOR_PREFIX):]] = None if raw == "" else _parse_scalar(raw)
        group = group.sort_values("t")
        records.append(SeriesRecord(series_id, group["t"].values, group["value"].values, descriptor))
    if inconsistent:
        raise PanelValidationError("descriptor values differ within a series", rows=inconsistent)

    logger.info("Loaded %s series (%s rows) from %s", len(records), len(frame), path)
    return PanelDataset(records, encoder)


def _parse_scalar(raw):
    try:
        return float(raw)
    except ValueError:
        return raw


def write_panel(dataset, path):
    """Writes ``dataset``'s raw values and descriptors in the panel CSV schema."""
    fields = sorted({k for s in dataset for k in s.raw_descriptor})
    rows = []
    for s in dataset:
        for t, v in zip(s.times, s.raw_values):
            row = OrderedDict([("series_id", s.series_id), ("t", int(t)), ("value", repr(float(v)))])
            for f in fields:
                value = s.raw_descriptor.get(f)
                row[DESCRIPTOR_PREFIX + f] = "" if value is None else _format_scalar(value)
            rows.append(row)
    columns = list(REQUIRED_COLUMNS) + [DESCRIPTOR_PREFIX + f for f in fields]
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def _format_scalar(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def normalize_max_align(dataset):
    """Divides each series by its maximum and re-indexes time from launch.

    Series whose maximum is not positive are dropped with a warning.
    """
    out = []
    for s in dataset:
        peak = float(np.max(s.raw_values)) if s.raw_values.size else 0.0
        if peak <= 0:
            logger.warning("Dropping series %s: maximum is %s", s.series_id, peak)
            continue
        out.append(
            s.replace(
                times=s.times - s.times[0] + 1,
                values=(s.raw_values / peak).reshape(-1, 1),
                meta=TransformMeta("max", peak),
            )
        )
    return dataset.with_series(out, "max")


def log_increment_transform(dataset):
    """``x_t = log(1 + increment_t)`` of cumulative counts, with the first
    increment set to 0 and negative increments floored at 0."""
    out = []
    for s in dataset:
        if np.any(s.raw_values < 0):
            raise PanelValidationError(
                "series {} has negative cumulative values".format(s.series_id)
            )
        inc = np.diff(s.raw_values, prepend=s.raw_values[:1])
        if np.any(inc < 0):
            logger.warning(
                "Series %s: %s negative increments floored at 0", s.series_id, int(np.sum(inc < 0))
            )
            inc = np.maximum(inc, 0.0)
        out.append(
            s.replace(
                times=s.times - s.times[0] + 1,
                values=np.log1p(inc).reshape(-1, 1),
                meta=TransformMeta("log_increment"),
            )
        )
    return dataset.with_series(out, "log_increment")


def inverse_transform(values, meta):
    return meta.invert(values)


def apply_normalization(dataset, mode):
    if mode == "max":
        return normalize_max_align(dataset)
    if mode == "log_increment":
        return log_increment_transform(dataset)
    if mode == "none":
        return dataset
    raise ConfigurationError("unknown normalization {!r}".format(mode), key="normalization")


def segment_episodes(dataset, min_len=10):
    """Splits series at gaps in their time index into episodes
    ``<id>#<k>`` (k from 1), each re-aligned to start at 1; episodes shorter
    than ``min_len`` are dropped."""
    out = []
    for s in dataset:
        if not s.times.size:
            continue
        cuts = np.where(np.diff(s.times) > 1)[0] + 1
        for k, idx in enumerate(np.split(np.arange(s.times.size), cuts), start=1):
            if idx.size < min_len:
                continue
            out.append(
                s.replace(
                    series_id="{}#{}".format(s.series_id, k),
                    times=np.arange(1, idx.size + 1),
                    raw_values=s.raw_values[idx],
                    values=s.values[idx],
                )
            )
    if not out:
        logger.warning("No episode reaches the minimum length %s", min_len)
    return dataset.with_series(out)


def _curve(family, p, q, T):
    t = np.arange(0, T + 1, dtype=np.float64)
    decay = np.exp(-(p + q) * t)
    cumulative = (1.0 - decay) / (1.0 + (q / p) * decay)
    if family == "bass":
        return np.diff(cumulative)
    return cumulative[1:]


def generate_synthetic(n_series, T, seed, family="bass", noise=0.1):
    """Seeded synthetic panel.

    Each series gets a category (A/B/C), a ``scale`` in [0.5, 2] and an
    ``access`` flag. Category and access set the curve shape (adoption
    speed), and the noise-free peak equals ``100 * scale``. ``family`` is
    ``"bass"`` (rise, peak, decline) or ``"persistent"`` (rise and stay).
    Observations carry multiplicative log-normal noise of scale ``noise``.
    """
    if family not in FAMILIES:
        raise ConfigurationError(
            "must be one of {}, got {!r}".format(", ".join(FAMILIES), family), key="synthetic_family"
        )
    if T < 1:
        raise ConfigurationError("must be at least 1", key="synthetic_length")
    root = RngStream(seed).spawn("synthetic")
    categories = list(_CATEGORY_CURVES)
    records = []
    for i in range(n_series):
        rng = root.spawn(i)
        category = categories[int(rng.integers(0, len(categories)))]
        scale = float(rng.uniform(0.5, 2.0))
        access = int(rng.integers(0, 2))
        p, q = _CATEGORY_CURVES[category]
        if access:
            p *= 2.0
        shape = _curve(family, p, q, T)
        clean = 100.0 * scale * shape / shape.max()
        values = clean * np.exp(noise * rng.normal(T) - 0.5 * noise ** 2) if noise else clean
        records.append(
            SeriesRecord(
                "s{:04d}".format(i),
                np.arange(1, T + 1),
                values,
                {"category": category, "scale": scale, "access": access},
            )
        )
    return PanelDataset(records)
