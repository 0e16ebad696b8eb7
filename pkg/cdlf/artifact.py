"""Model artifact and report files.

The model is stored as an Avro object container: one record per parameter
tensor, with the configuration, descriptor encoding and lineage kept in the
file metadata so a single file restores a forecaster.
"""
import json
import logging
import os
from collections import namedtuple

import numpy as np
import pandas as pd
from fastavro import parse_schema, reader, writer
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from cdlf._version import __version__
from cdlf.config import RunConfig
from cdlf.context import DescriptorEncoder
from cdlf.errors import ArtifactError
from cdlf.metrics import window_row
from cdlf.model import ModelConfig, ModelParameters, parameter_shapes

logger = logging.getLogger("cdlf.artifact")

FORMAT_VERSION = "1"
TEMPLATE_DIR = os.path.join(os.path.dirname(__file__), "templates")
BAND_LEVELS = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)

TENSOR_SCHEMA = parse_schema(
    {
        "type": "record",
        "name": "ParameterTensor",
        "namespace": "cdlf",
        "fields": [
            {"name": "name", "type": "string"},
            {"name": "shape", "type": {"type": "array", "items": "long"}},
            {"name": "values", "type": {"type": "array", "items": "double"}},
        ],
    }
)

LoadedModel = namedtuple("LoadedModel", ["params", "config", "encoder", "lineage"])


def save_model(path, params, config, encoder, lineage=None):
    """Writes ``params`` with the run configuration, the descriptor encoder
    and ``lineage`` (seed, steps, ...) to ``path``."""
    lineage = dict(lineage or {})
    lineage.setdefault("version", __version__)
    metadata = {
        "cdlf.format_version": FORMAT_VERSION,
        "cdlf.config": json.dumps({"run": config.to_dict(), "model": params.config.to_dict()}),
        "cdlf.encoder": json.dumps(encoder.to_dict()),
        "cdlf.lineage": json.dumps(lineage, default=_json_default),
    }
    records = (
        {"name": name, "shape": list(value.shape), "values": value.ravel().tolist()}
        for name, value in params.items()
    )
    with open(path, "wb") as f:
        writer(f, TENSOR_SCHEMA, records, metadata=metadata)
    logger.info("Saved model with %s tensors to %s", len(params), path)


def load_model(path):
    try:
        with open(path, "rb") as f:
            avro_reader = reader(f)
            metadata = avro_reader.metadata
            tensors = [
                (rec["name"], np.array(rec["values"], dtype=np.float64).reshape(rec["shape"]))
                for rec in avro_reader
            ]
    except (OSError, ValueError, EOFError) as ex:
        raise ArtifactError("Could not read model artifact {}: {}".format(path, ex))

    version = metadata.get("cdlf.format_version")
    if version != FORMAT_VERSION:
        raise ArtifactError(
            "Model artifact {} has format version {!r}, expected {!r}".format(
                path, version, FORMAT_VERSION
            )
        )
    try:
        stored = json.loads(metadata["cdlf.config"])
        model_config = ModelConfig.from_dict(stored["model"])
        config = RunConfig(stored["run"])
        encoder = DescriptorEncoder.from_dict(json.loads(metadata["cdlf.encoder"]))
        lineage = json.loads(metadata["cdlf.lineage"])
    except (KeyError, TypeError, ValueError) as ex:
        raise ArtifactError("Model artifact {} has bad metadata: {}".format(path, ex))

    expected = parameter_shapes(model_config)
    found = dict(tensors)
    if set(found) != set(expected):
        raise ArtifactError(
            "Model artifact {} does not match its architecture (missing {}, extra {})".format(
                path,
                sorted(set(expected) - set(found)),
                sorted(set(found) - set(expected)),
            )
        )
    params = ModelParameters(((name, found[name]) for name in expected), model_config)
    return LoadedModel(params, config, encoder, lineage)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError("{!r} is not JSON serializable".format(value))


def write_json(data, path):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def write_frame(frame, path):
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def write_metrics(report, path, **extra):
    data = report.to_dict()
    data.update(extra)
    return write_json(data, path)


def write_windows(scores, path):
    return write_frame(pd.DataFrame([window_row(s) for s in scores]), path)


def quantile_band_frame(distributions, levels=BAND_LEVELS):
    """Long-format bands ``series_id,t,u,value`` on the raw scale.

    ``t`` is the absolute time index of each forecast step. A ``dim`` column
    is added for multivariate forecasts.
    """
    rows = []
    for dist in distributions:
        if not dist.horizon:
            continue
        q = np.quantile(dist.raw_samples(), levels, axis=0)
        D = q.shape[2]
        for lead in range(dist.horizon):
            for j, u in enumerate(levels):
                for d in range(D):
                    row = {
                        "series_id": dist.series_id,
                        "t": dist.origin + lead,
                        "u": float(u),
                        "value": float(q[j, lead, d]),
                    }
                    if D > 1:
                        row["dim"] = d
                    rows.append(row)
    columns = ["series_id", "t", "u", "value"]
    if rows and "dim" in rows[0]:
        columns.append("dim")
    return pd.DataFrame(rows, columns=columns)


def write_quantile_bands(distributions, path, levels=BAND_LEVELS):
    return write_frame(quantile_band_frame(distributions, levels), path)


def _environment():
    return Environment(
        loader=FileSystemLoader(TEMPLATE_DIR),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def render_template(name, **context):
    return _environment().get_template(name).render(**context)


def render_ablation(title, rows, bands):
    return render_template("ablation.txt.j2", title=title, rows=rows, bands=bands)


def render_stability(report):
    return render_template("stability.txt.j2", report=report.to_dict())
