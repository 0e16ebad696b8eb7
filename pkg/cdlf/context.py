"""Conditioning context: analog references, static descriptors and the
latent-state transition."""
import logging
import math
from collections import namedtuple

import numpy as np

from cdlf.errors import DimensionError
from cdlf.numerics import (
    affine_forward,
    ensure_finite,
    gru_forward,
    gru_sequence_backward,
    gru_sequence_forward,
    relu,
)

logger = logging.getLogger("cdlf.context")

UNKNOWN = "unknown"
FUSION_MODES = ("concat", "multiplicative")


class DescriptorEncoder(object):
    """Maps raw descriptor fields to a standardized vector.

    Numeric fields are z-scored with the mean and standard deviation of the
    library the encoder was fitted on (a zero deviation is replaced by 1).
    Categorical fields are one-hot encoded over the categories seen while
    fitting plus a trailing ``"unknown"`` slot. Missing numerics encode to 0,
    missing or unseen categories to ``"unknown"``.
    """

    def __init__(self, numeric=None, categorical=None):
        # numeric: [(name, mean, std)], categorical: [(name, [labels])]
        self.numeric = [tuple(f) for f in (numeric or [])]
        self.categorical = [(name, list(labels)) for name, labels in (categorical or [])]

    @classmethod
    def fit(cls, descriptors, numeric_fields=None):
        """Fits on a sequence of raw descriptor dicts.

        Fields are numeric when every present value converts to float, unless
        ``numeric_fields`` names them explicitly.
        """
        descriptors = list(descriptors)
        names = sorted({k for d in descriptors for k in d})
        numeric, categorical = [], []
        for name in names:
            present = [d[name] for d in descriptors if not _is_missing(d.get(name))]
            if numeric_fields is not None:
                is_numeric = name in numeric_fields
            else:
                is_numeric = all(_is_number(v) for v in present)
            if is_numeric:
                values = np.array([float(v) for v in present], dtype=np.float64)
                mean = float(values.mean()) if values.size else 0.0
                std = float(values.std()) if values.size else 0.0
                numeric.append((name, mean, std if std > 0 else 1.0))
            else:
                labels = sorted({str(v) for v in present} - {UNKNOWN})
                categorical.append((name, labels))
        return cls(numeric, categorical)

    @property
    def dim(self):
        return len(self.numeric) + sum(len(labels) + 1 for _, labels in self.categorical)

    @property
    def fields(self):
        return [f[0] for f in self.numeric] + [f[0] for f in self.categorical]

    def encode(self, raw):
        out = []
        for name, mean, std in self.numeric:
            value = raw.get(name)
            out.append(0.0 if _is_missing(value) else (float(value) - mean) / std)
        for name, labels in self.categorical:
            onehot = [0.0] * (len(labels) + 1)
            value = raw.get(name)
            label = UNKNOWN if _is_missing(value) else str(value)
            onehot[labels.index(label) if label in labels else len(labels)] = 1.0
            out.extend(onehot)
        return ensure_finite(np.array(out, dtype=np.float64), "descriptor")

    def to_dict(self):
        return {
            "numeric": [list(f) for f in self.numeric],
            "categorical": [[name, labels] for name, labels in self.categorical],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data.get("numeric"), data.get("categorical"))

    def __eq__(self, other):
        return isinstance(other, DescriptorEncoder) and self.to_dict() == other.to_dict()


def _is_missing(value):
    if value is None:
        return True
    try:
        return math.isnan(value)
    except TypeError:
        return value == ""


def _is_number(value):
    if isinstance(value, bool):
        return True
    try:
        float(value)
    except (TypeError, ValueError):
        return False
    return True


StaticDescriptor = namedtuple("StaticDescriptor", ["raw", "vector"])

ReferenceEntry = namedtuple("ReferenceEntry", ["series_id", "trajectory", "descriptor"])

SelectedReference = namedtuple("SelectedReference", ["entry", "sq_distance", "index"])


class ReferenceLibrary(object):
    """Historical trajectories with their standardized descriptors."""

    def __init__(self, entries):
        self.entries = list(entries)
        self._descriptors = (
            np.stack([e.descriptor for e in self.entries]) if self.entries else None
        )

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def series_ids(self):
        return [e.series_id for e in self.entries]

    @property
    def descriptors(self):
        return self._descriptors

    def without(self, series_id):
        return ReferenceLibrary(e for e in self.entries if e.series_id != series_id)


def select_references(s, library, K):
    """The ``K`` entries nearest to ``s`` in squared Euclidean distance,
    ties broken by library order."""
    if K < 1:
        raise DimensionError("need at least one reference, got K={}".format(K))
    if not len(library):
        raise DimensionError("reference library is empty")
    s = ensure_finite(s, "descriptor")
    if library.descriptors.shape[1] != s.shape[0]:
        raise DimensionError(
            "descriptor has {} entries, library has {}".format(
                s.shape[0], library.descriptors.shape[1]
            )
        )
    sq = np.sum((library.descriptors - s) ** 2, axis=1)
    order = np.argsort(sq, kind="stable")[:K]
    return [SelectedReference(library.entries[i], float(sq[i]), int(i)) for i in order]


def similarity_weights(s, selected, temperature):
    """Softmax of ``-temperature * ||s_k - s||^2`` over the selected references.

    Weights are floored at the smallest positive double and renormalized, so
    every reference keeps a strictly positive weight.
    """
    if temperature < 0:
        raise DimensionError("temperature must be non-negative, got {}".format(temperature))
    s = np.asarray(s, dtype=np.float64)
    sq = np.array([np.sum((ref.entry.descriptor - s) ** 2) for ref in selected])
    logits = -temperature * sq
    w = np.exp(logits - logits.max())
    w /= w.sum()
    tiny = np.finfo(np.float64).tiny
    if np.any(w < tiny):
        w = np.maximum(w, tiny)
        w /= w.sum()
    return w


def encode_reference(traj, p):
    """Final hidden state of the reference encoder run over ``traj`` from zero."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] < 1:
        raise DimensionError("reference trajectory must be a non-empty T x D matrix")
    states, _ = gru_sequence_forward(traj, p)
    return states[-1]


def fuse_concat(h_k, omega_k, W_omega, b_omega):
    """``relu(W_omega [h_k; omega_k] + b_omega)``."""
    return relu(affine_forward(np.append(h_k, omega_k), W_omega, b_omega))


def fuse_multiplicative(h_k, omega_k):
    return omega_k * np.asarray(h_k, dtype=np.float64)


def aggregation_order(omega):
    # descending weight, ties keep selection order
    return np.argsort(-np.asarray(omega), kind="stable")


def aggregate_references(fused, omega, p):
    if len(fused) == 0:
        raise DimensionError("no references to aggregate")
    if len(fused) != len(omega):
        raise DimensionError("{} embeddings but {} weights".format(len(fused), len(omega)))
    ordered = np.stack([fused[i] for i in aggregation_order(omega)])
    states, _ = gru_sequence_forward(ordered, p)
    return states[-1]


def encode_static(s, W1, b1, W2, b2):
    return relu(affine_forward(relu(affine_forward(s, W1, b1)), W2, b2))


def init_state(c, W0, b0):
    return affine_forward(c, W0, b0)


def transition(h_prev, x_t, c, p):
    """One latent update with input ``[x_t; c]``.

    ``h_prev`` and ``x_t`` may carry a leading batch axis; ``c`` is shared.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    x_in = np.concatenate([x_t, np.broadcast_to(c, x_t.shape[:-1] + c.shape)], axis=-1)
    h_new, _ = gru_forward(h_prev, x_in, p)
    return h_new


ContextVector = namedtuple("ContextVector", ["h_ref", "h_static", "c", "h0"])

_RefCache = namedtuple("_RefCache", ["trajectory", "states", "gates", "fuse_in", "fuse_pre"])
ContextCache = namedtuple(
    "ContextCache", ["s", "omega", "refs", "order", "agg_inputs", "agg", "static", "c"]
)


def build_context(s, selected, params, config, keep_cache=False):
    """Builds ``c = [h_ref; h_static]`` and ``h0`` for one focal series.

    ``config`` supplies ``temperature``, ``fusion``, ``use_references`` and
    ``use_static``. With ``keep_cache`` the intermediate values needed by
    :func:`context_backward` are returned alongside.
    """
    s = ensure_finite(s, "descriptor")
    ref_p = params.gru("ref_encoder")
    d = ref_p.hidden_size
    omega = None
    refs = []
    order = None
    agg_inputs = None
    agg = None
    if config.use_references:
        if not selected:
            raise DimensionError("context needs at least one reference")
        omega = similarity_weights(s, selected, config.temperature)
        fused = []
        for ref, w in zip(selected, omega):
            states, gates = gru_sequence_forward(ref.entry.trajectory, ref_p)
            h_k = states[-1]
            fuse_in = fuse_pre = None
            if config.fusion == "concat":
                fuse_in = np.append(h_k, w)
                fuse_pre = affine_forward(fuse_in, params["fusion.W"], params["fusion.b"])
                fused.append(relu(fuse_pre))
            else:
                fused.append(fuse_multiplicative(h_k, w))
            refs.append(_RefCache(ref.entry.trajectory, states, gates, fuse_in, fuse_pre))
        order = aggregation_order(omega)
        agg_inputs = np.stack([fused[i] for i in order])
        agg = gru_sequence_forward(agg_inputs, params.gru("aggregator"))
        h_ref = agg[0][-1]
    else:
        h_ref = np.zeros(d)

    static = None
    ds = params["static.b2"].shape[0]
    if config.use_static:
        a1 = affine_forward(s, params["static.W1"], params["static.b1"])
        a2 = affine_forward(relu(a1), params["static.W2"], params["static.b2"])
        static = (a1, a2)
        h_static = relu(a2)
    else:
        h_static = np.zeros(ds)

    c = np.concatenate([h_ref, h_static])
    h0 = init_state(c, params["init.W"], params["init.b"])
    ctx = ContextVector(h_ref, h_static, c, h0)
    if not keep_cache:
        return ctx
    return ctx, ContextCache(s, omega, refs, order, agg_inputs, agg, static, c)


def context_backward(d_h0, d_c, cache, params, config):
    """Gradients of the context parameters given ``dL/dh0`` and the gradient
    reaching ``c`` through the transition inputs."""
    grads = {}
    grads["init.W"] = np.outer(d_h0, cache.c)
    grads["init.b"] = np.array(d_h0, dtype=np.float64)
    d_c = params["init.W"].T @ d_h0 + d_c
    d = params["aggregator.U_z"].shape[0]
    d_href, d_hs = d_c[:d], d_c[d:]

    if cache.static is not None:
        a1, a2 = cache.static
        da2 = d_hs * (a2 > 0)
        grads["static.W2"] = np.outer(da2, relu(a1))
        grads["static.b2"] = da2
        da1 = (params["static.W2"].T @ da2) * (a1 > 0)
        grads["static.W1"] = np.outer(da1, cache.s)
        grads["static.b1"] = da1

    if cache.refs:
        agg_p = params.gru("aggregator")
        states, gates = cache.agg
        _, d_ordered, agg_grads = gru_sequence_backward(
            d_href, cache.agg_inputs, states, gates, agg_p
        )
        _add_gru(grads, "aggregator", agg_grads)
        d_fused = np.zeros_like(d_ordered)
        d_fused[cache.order] = d_ordered
        ref_p = params.gru("ref_encoder")
        if config.fusion == "concat":
            grads["fusion.W"] = np.zeros_like(params["fusion.W"])
            grads["fusion.b"] = np.zeros_like(params["fusion.b"])
        for k, ref in enumerate(cache.refs):
            if config.fusion == "concat":
                da = d_fused[k] * (ref.fuse_pre > 0)
                grads["fusion.W"] += np.outer(da, ref.fuse_in)
                grads["fusion.b"] += da
                dh_k = (params["fusion.W"].T @ da)[:d]
            else:
                dh_k = cache.omega[k] * d_fused[k]
            _, _, ref_grads = gru_sequence_backward(
                dh_k, ref.trajectory, ref.states, ref.gates, ref_p
            )
            _add_gru(grads, "ref_encoder", ref_grads)
    return grads


def _add_gru(grads, prefix, gru_grads):
    for name, value in gru_grads._asdict().items():
        key = "{}.{}".format(prefix, name)
        grads[key] = grads[key] + value if key in grads else value.copy()
