import logging
import zlib
from collections import namedtuple
from functools import lru_cache

import numpy as np

from cdlf.errors import ConfigurationError, DimensionError, NonFiniteError

logger = logging.getLogger("cdlf.numerics")

MASK64 = (1 << 64) - 1
POWER_ITERATION_SEED = 0x5EED


def ensure_finite(value, name):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("{} contains non-finite entries".format(name))
    return arr


def stream_key(name):
    """Stable integer key for a named sub-stream (group names, variants)."""
    return zlib.crc32(name.encode("utf-8"))


class RngStream(object):
    """Seeded, splittable source of Gaussian and uniform variates.

    Backed by numpy's Philox counter-based bit generator, whose output is
    specified bit-for-bit, so one seed yields one sequence on every
    platform. A stream is identified by ``seed`` and a ``path`` of integer
    keys; ``spawn(key)`` extends the path and returns an independent
    sub-stream. Sub-streams do not depend on how much of the parent has
    been consumed, which is what lets rollouts run in any order or in
    parallel and still reproduce.

    Parameters
    ----------
    seed : int
        64-bit seed. Larger integers are reduced modulo 2**64.
    path : tuple of int, optional
        Spawn keys leading from the root stream to this one.

    Attributes
    ----------
    counter : int
        Number of variates drawn so far.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) & MASK64
        self.path = tuple(int(k) for k in path)
        seed_seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._generator = np.random.Generator(np.random.Philox(seed_seq))
        self.counter = 0

    def spawn(self, key):
        if isinstance(key, str):
            key = stream_key(key)
        return RngStream(self.seed, self.path + (int(key),))

    def normal(self, size=None):
        out = self._generator.standard_normal(size)
        self.counter += int(np.size(out))
        return out

    def uniform(self, low=0.0, high=1.0, size=None):
        out = self._generator.uniform(low, high, size)
        self.counter += int(np.size(out))
        return out

    def integers(self, low, high, size=None):
        """Integers in ``[low, high)``."""
        out = self._generator.integers(low, high, size=size)
        self.counter += int(np.size(out))
        return out

    def permutation(self, n):
        out = self._generator.permutation(n)
        self.counter += int(n)
        return out

    def __repr__(self):
        return "RngStream(seed={}, path={}, counter={})".format(
            self.seed, self.path, self.counter
        )


def sigmoid(x):
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0.0)


def affine_forward(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    if W.shape[1] != x.shape[-1] or b.shape != (W.shape[0],):
        raise DimensionError(
            "affine map {} with bias {} cannot take input of width {}".format(
                W.shape, b.shape, x.shape[-1]
            )
        )
    return x @ W.T + b


def affine_backward(dy, x, W):
    """Returns (dx, dW, db) for ``y = W x + b`` on unbatched vectors."""
    return W.T @ dy, np.outer(dy, x), dy.copy()


class GruParams(
    namedtuple("GruParams", ["W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"])
):
    """Weights of one GRU cell.

    ``W_*`` are hidden x input, ``U_*`` hidden x hidden and ``b_*`` have
    length hidden. The same tuple type carries gradients.
    """

    __slots__ = ()

    INPUT = ("W_z", "W_r", "W_h")
    RECURRENT = ("U_z", "U_r", "U_h")
    BIAS = ("b_z", "b_r", "b_h")

    @property
    def hidden_size(self):
        return self.U_z.shape[0]

    @property
    def input_size(self):
        return self.W_z.shape[1]

    @classmethod
    def zeros(cls, hidden_size, input_size):
        return cls(
            *[np.zeros((hidden_size, input_size)) for _ in cls.INPUT],
            *[np.zeros((hidden_size, hidden_size)) for _ in cls.RECURRENT],
            *[np.zeros(hidden_size) for _ in cls.BIAS],
        )

    def validate(self):
        m, d = self.hidden_size, self.input_size
        for name in self.INPUT:
            if getattr(self, name).shape != (m, d):
                raise DimensionError("{} must be {}x{}".format(name, m, d))
        for name in self.RECURRENT:
            if getattr(self, name).shape != (m, m):
                raise DimensionError("{} must be {}x{}".format(name, m, m))
        for name in self.BIAS:
            if getattr(self, name).shape != (m,):
                raise DimensionError("{} must have length {}".format(name, m))
        for name, value in self._asdict().items():
            ensure_finite(value, name)
        return self


GateValues = namedtuple("GateValues", ["z", "r", "h_tilde"])


def gru_forward(h_prev, x_in, p):
    """One GRU step, ``h_new = (1 - z) * h_prev + z * h_tilde``.

    Works on single vectors or on batches stacked along the first axis.
    Returns the new hidden state and the gate activations, which callers
    keep for backpropagation and stability monitoring.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x_in = np.asarray(x_in, dtype=np.float64)
    if h_prev.shape[-1] != p.hidden_size or x_in.shape[-1] != p.input_size:
        raise DimensionError(
            "GRU expects hidden {} and input {}, got {} and {}".format(
                p.hidden_size, p.input_size, h_prev.shape[-1], x_in.shape[-1]
            )
        )
    z = sigmoid(x_in @ p.W_z.T + h_prev @ p.U_z.T + p.b_z)
    r = sigmoid(x_in @ p.W_r.T + h_prev @ p.U_r.T + p.b_r)
    h_tilde = np.tanh(x_in @ p.W_h.T + (r * h_prev) @ p.U_h.T + p.b_h)
    h_new = (1.0 - z) * h_prev + z * h_tilde
    return h_new, GateValues(z, r, h_tilde)


def gru_backward(dh_new, h_prev, x_in, gates, p):
    """Backpropagates one unbatched GRU step.

    Returns
    -------
    dh_prev : ndarray
    dx : ndarray
    grads : GruParams
    """
    z, r, h_tilde = gates
    dz = dh_new * (h_tilde - h_prev)
    dh_prev = dh_new * (1.0 - z)
    da_h = dh_new * z * (1.0 - h_tilde ** 2)
    rh = r * h_prev
    d_rh = p.U_h.T @ da_h
    dh_prev = dh_prev + d_rh * r
    da_r = d_rh * h_prev * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    dx = p.W_z.T @ da_z + p.W_r.T @ da_r + p.W_h.T @ da_h
    dh_prev = dh_prev + p.U_z.T @ da_z + p.U_r.T @ da_r
    grads = GruParams(
        W_z=np.outer(da_z, x_in),
        W_r=np.outer(da_r, x_in),
        W_h=np.outer(da_h, x_in),
        U_z=np.outer(da_z, h_prev),
        U_r=np.outer(da_r, h_prev),
        U_h=np.outer(da_h, rh),
        b_z=da_z,
        b_r=da_r,
        b_h=da_h,
    )
    return dh_prev, dx, grads


def gru_sequence_forward(inputs, p, h0=None):
    """Runs the cell over ``inputs`` (one row per step) from ``h0`` (zeros by
    default). Returns all states, ``states[0]`` being ``h0``, and the gates of
    every step."""
    h = np.zeros(p.hidden_size) if h0 is None else np.asarray(h0, dtype=np.float64)
    states = [h]
    gates = []
    for x in inputs:
        h, g = gru_forward(h, x, p)
        states.append(h)
        gates.append(g)
    return states, gates


def gru_sequence_backward(dh_final, inputs, states, gates, p):
    """Backpropagates :func:`gru_sequence_forward` from the final state.

    Returns the gradient with respect to the initial state, the per-step
    input gradients (one row per step) and the summed parameter gradients.
    """
    totals = GruParams.zeros(p.hidden_size, p.input_size)
    d_inputs = np.zeros((len(gates), p.input_size))
    dh = np.asarray(dh_final, dtype=np.float64)
    for i in reversed(range(len(gates))):
        dh, d_inputs[i], step_grads = gru_backward(dh, states[i], inputs[i], gates[i], p)
        for total, grad in zip(totals, step_grads):
            total += grad
    return dh, d_inputs, totals


def orthonormal_columns(rng, rows, cols):
    """A rows x cols matrix with orthonormal columns from the QR factor of a
    seeded Gaussian matrix, signs fixed so ``diag(R) > 0``."""
    if rows < cols:
        raise DimensionError("need rows >= cols, got {}x{}".format(rows, cols))
    q, r = np.linalg.qr(rng.normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@lru_cache(maxsize=64)
def _start_vector(n):
    v = RngStream(POWER_ITERATION_SEED).normal(n)
    return v / np.linalg.norm(v)


def spectral_norm(M, iters=1000, tol=1e-13):
    """Largest singular value of ``M`` by power iteration on ``M^T M``.

    The start vector is fixed (seeded), so the estimate is deterministic.
    Iteration stops early once the relative change drops below ``tol``.
    """
    M = ensure_finite(M, "matrix")
    if M.ndim != 2:
        raise DimensionError("spectral_norm expects a matrix, got shape {}".format(M.shape))
    if M.size == 0 or not np.any(M):
        return 0.0
    v = _start_vector(M.shape[1]).copy()
    sigma = 0.0
    for _ in range(iters):
        u = M @ v
        u_norm = np.linalg.norm(u)
        if u_norm == 0.0:
            return 0.0
        u /= u_norm
        v = M.T @ u
        new_sigma = np.linalg.norm(v)
        v /= new_sigma
        converged = abs(new_sigma - sigma) <= tol * new_sigma
        sigma = new_sigma
        if converged:
            break
    return float(sigma)


def spectral_clip(M, cap, iters=1000, tol=1e-13):
    """Rescales ``M`` so its spectral norm is at most ``cap``.

    Matrices already inside the cap are returned as is.
    """
    if not cap > 0:
        raise ConfigurationError("cap must be positive, got {}".format(cap), key="cap")
    sigma = spectral_norm(M, iters, tol)
    if sigma <= cap:
        return M
    return M * (cap / sigma)


def clip_global_norm(grads, max_norm):
    """Scales every gradient by a common factor so the joint norm is at most
    ``max_norm``. Returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


class OptimizerState(object):
    """Adaptive-moment (Adam) optimizer state.

    Moments are kept per parameter name and created lazily on the first
    update of that parameter.
    """

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first_moment = {}
        self.second_moment = {}

    def reset(self, names):
        for name in names:
            self.first_moment.pop(name, None)
            self.second_moment.pop(name, None)


def optimizer_step(params, grads, state):
    """Applies one bias-corrected adaptive-moment update in place.

    ``theta -= lr * m_hat / (sqrt(v_hat) + eps)`` with
    ``m_hat = m / (1 - beta1**t)`` and ``v_hat = v / (1 - beta2**t)``.
    On the first step this moves each coordinate by about ``lr * sign(g)``.

    Returns the same ``(params, state)`` objects for chaining.
    """
    for name in sorted(grads):
        if name not in params:
            raise DimensionError("gradient for unknown parameter {}".format(name))
        grad = ensure_finite(grads[name], "gradient {}".format(name))
        if grad.shape != params[name].shape:
            raise DimensionError(
                "gradient {} has shape {}, parameter has {}".format(
                    name, grad.shape, params[name].shape
                )
            )

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name in sorted(grads):
        grad = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        params[name] = params[name] - update
    return params, state
