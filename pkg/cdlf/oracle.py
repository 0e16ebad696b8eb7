"""Linear-Gaussian systems with exactly known stability constants.

A reference system and a model system run side by side:

    x_t   ~ N(C h*_{t-1}, I)            h*_t = rho R h*_{t-1} + l_x B x_t
    x^_t  ~ N(C h^_{t-1} + b_mis, I)    h^_t = rho R h^_{t-1} + l_x B x^_t + d_f

with ``||R|| = ||B|| = 1``, ``||C|| = L_P``, ``||b_mis|| = eps_gen`` and
``||d_f|| = eps_f``. Both one-step laws share their covariance, so their
1-Wasserstein distance is the norm of the mean difference.
"""
import logging
from collections import namedtuple

import numpy as np
import pandas as pd

from cdlf.errors import ConfigurationError
from cdlf.numerics import RngStream, orthonormal_columns

logger = logging.getLogger("cdlf.oracle")

COUPLINGS = ("aligned", "random")
PULSE_DIRECTIONS = ("unobserved", "observed")


def _unit(rng, n):
    v = rng.normal(n)
    return v / np.linalg.norm(v)


def _orthonormal(rng, rows, cols):
    """rows x cols with orthonormal columns, or orthonormal rows when wide."""
    if rows >= cols:
        return orthonormal_columns(rng, rows, cols)
    return orthonormal_columns(rng, cols, rows).T


class OracleSystem(object):
    def __init__(self, rho, lx, lp, eps_gen, eps_f, R, B, C, b_mis, d_f, coupling):
        self.rho = rho
        self.lx = lx
        self.lp = lp
        self.eps_gen = eps_gen
        self.eps_f = eps_f
        self.R = R
        self.B = B
        self.C = C
        self.b_mis = b_mis
        self.d_f = d_f
        self.coupling = coupling

    @property
    def latent_dim(self):
        return self.R.shape[0]

    @property
    def obs_dim(self):
        return self.C.shape[0]

    @property
    def A(self):
        return self.rho * self.R

    @property
    def input_matrix(self):
        return self.lx * self.B

    @property
    def kappa(self):
        if self.rho >= 1:
            return float("inf")
        return self.lp * self.lx / (1.0 - self.rho)

    def bound(self, e0=0.0):
        """Horizon-uniform ceiling on the one-step W1 error; ``inf`` when the
        system is not contracting."""
        k = self.kappa
        if k >= 1:
            return float("inf")
        return (self.eps_gen + self.lp * self.eps_f / (1.0 - self.rho) + self.lp * e0) / (1.0 - k)

    def unobserved_direction(self):
        """Unit latent vector in the null space of ``C``, or ``None``."""
        _, s, vt = np.linalg.svd(self.C)
        rank = int(np.sum(s > 1e-12 * max(1.0, s.max())))
        if rank >= self.latent_dim:
            return None
        return vt[rank]

    def observed_direction(self):
        _, _, vt = np.linalg.svd(self.C)
        return vt[0]

    def __repr__(self):
        return "OracleSystem(rho={}, lx={}, lp={}, eps_gen={}, eps_f={}, m={}, D={}, {})".format(
            self.rho, self.lx, self.lp, self.eps_gen, self.eps_f,
            self.latent_dim, self.obs_dim, self.coupling,
        )


def build_oracle(
    rho, lx, lp, eps_gen=0.0, eps_f=0.0, latent_dim=4, obs_dim=1, seed=0, coupling="aligned"
):
    """Constructs an :class:`OracleSystem` with the requested constants.

    ``coupling="aligned"`` uses ``R = I`` and ``C = L_P B^T`` so the input
    and emission gains compound at their worst case; ``"random"`` draws
    ``R``, ``B`` and ``C`` independently from QR factors of seeded Gaussian
    matrices.
    """
    if latent_dim < 1 or obs_dim < 1:
        raise ConfigurationError(
            "dimensions must be positive, got m={} D={}".format(latent_dim, obs_dim),
            key="oracle_latent_dim",
        )
    if rho < 0 or lx < 0 or lp < 0 or eps_gen < 0 or eps_f < 0:
        raise ConfigurationError("oracle constants must be non-negative", key="oracle")
    if coupling not in COUPLINGS:
        raise ConfigurationError(
            "must be one of {}, got {!r}".format(", ".join(COUPLINGS), coupling),
            key="oracle_coupling",
        )
    rng = RngStream(seed)
    m, D = latent_dim, obs_dim
    B = _orthonormal(rng.spawn("B"), m, D)
    if coupling == "aligned":
        R = np.eye(m)
        C = lp * B.T
    else:
        R = orthonormal_columns(rng.spawn("R"), m, m)
        C = lp * _orthonormal(rng.spawn("C"), D, m)
    b_mis = eps_gen * _unit(rng.spawn("b_mis"), D)
    d_f = eps_f * _unit(rng.spawn("d_f"), m)
    return OracleSystem(
        float(rho), float(lx), float(lp), float(eps_gen), float(eps_f), R, B, C, b_mis, d_f, coupling
    )


Pulse = namedtuple("Pulse", ["time", "magnitude", "direction"])


class RolloutStats(object):
    """Per-time Monte Carlo estimates over ``rollouts`` paired rollouts.

    ``e_hat[t-1]`` is the mean latent error at time ``t``, ``delta_hat[t-1]``
    the mean one-step W1 error and ``obs_gap[t-1]`` the mean observation gap
    ``||x^_t - x_t||``. ``*_se`` hold standard errors.
    """

    def __init__(
        self, e_hat, e_se, delta_hat, delta_se, obs_gap, rollouts, bound, pulse=None, excess=None
    ):
        self.e_hat = e_hat
        self.e_se = e_se
        self.delta_hat = delta_hat
        self.delta_se = delta_se
        self.obs_gap = obs_gap
        self.rollouts = rollouts
        self.bound = bound
        self.pulse = pulse
        self.excess = excess

    @property
    def horizon(self):
        return len(self.delta_hat)

    def plateau(self, fraction=0.2):
        tail = max(1, int(round(self.horizon * fraction)))
        return float(np.mean(self.delta_hat[-tail:]))

    def to_frame(self):
        return pd.DataFrame(
            {
                "t": np.arange(1, self.horizon + 1),
                "E_hat": self.e_hat,
                "Delta_hat": self.delta_hat,
                "bound": self.bound,
            }
        )


def simulate(sys, horizon, rollouts, e0=0.0, pulse=None, seed=0, common_noise=True):
    """Runs paired reference/model rollouts and averages their errors.

    Rollout ``i`` draws its noise from sub-stream ``i`` of ``seed``. With
    ``common_noise`` both systems share the draw (the optimal coupling),
    otherwise the model draws its own. ``e0`` offsets the model's initial
    state along the most observed latent direction. A ``pulse`` adds
    ``magnitude * direction`` to the model state at its time; the excess
    latent error over an identical pulse-free run is kept in ``excess``.
    """
    if rollouts < 1:
        raise ConfigurationError("must be at least 1", key="oracle_rollouts")
    if horizon < 1:
        raise ConfigurationError("must be at least 1", key="oracle_horizon")
    m, D = sys.latent_dim, sys.obs_dim
    root = RngStream(seed)
    noise = np.empty((rollouts, horizon, D))
    noise_model = np.empty((rollouts, horizon, D)) if not common_noise else noise
    for i in range(rollouts):
        stream = root.spawn(i)
        noise[i] = stream.normal((horizon, D))
        if not common_noise:
            noise_model[i] = stream.normal((horizon, D))

    h_ref0 = np.zeros((rollouts, m))
    h_mod0 = h_ref0 + e0 * sys.observed_direction()
    base = _run(sys, h_ref0, h_mod0, noise, noise_model, None)
    excess = None
    if pulse is not None:
        pulsed = _run(sys, h_ref0, h_mod0, noise, noise_model, pulse)
        excess = pulsed[0] - base[0]
        base = pulsed
    err, w1, gap = base
    stats = RolloutStats(
        e_hat=err.mean(axis=0),
        e_se=err.std(axis=0) / np.sqrt(rollouts),
        delta_hat=w1.mean(axis=0),
        delta_se=w1.std(axis=0) / np.sqrt(rollouts),
        obs_gap=gap.mean(axis=0),
        rollouts=rollouts,
        bound=sys.bound(e0),
        pulse=pulse,
        excess=None if excess is None else excess.mean(axis=0),
    )
    logger.debug("Simulated %s rollouts of %s steps, kappa=%.4g", rollouts, horizon, sys.kappa)
    return stats


def _run(sys, h_ref, h_mod, noise, noise_model, pulse):
    rollouts, horizon, _ = noise.shape
    A, Bx = sys.A, sys.input_matrix
    err = np.empty((rollouts, horizon))
    w1 = np.empty((rollouts, horizon))
    gap = np.empty((rollouts, horizon))
    for t in range(1, horizon + 1):
        mean_ref = h_ref @ sys.C.T
        mean_mod = h_mod @ sys.C.T + sys.b_mis
        w1[:, t - 1] = np.linalg.norm(mean_mod - mean_ref, axis=1)
        x = mean_ref + noise[:, t - 1]
        x_hat = mean_mod + noise_model[:, t - 1]
        gap[:, t - 1] = np.linalg.norm(x_hat - x, axis=1)
        h_ref = h_ref @ A.T + x @ Bx.T
        h_mod = h_mod @ A.T + x_hat @ Bx.T + sys.d_f
        if pulse is not None and t == pulse.time:
            h_mod = h_mod + pulse.magnitude * pulse.direction
        err[:, t - 1] = np.linalg.norm(h_mod - h_ref, axis=1)
    return err, w1, gap


def make_pulse(sys, time, magnitude=1.0, direction="unobserved"):
    """A pulse along a latent direction ``C`` ignores (falls back to the
    observed direction when ``C`` has full column rank)."""
    if direction not in PULSE_DIRECTIONS:
        raise ConfigurationError(
            "must be one of {}, got {!r}".format(", ".join(PULSE_DIRECTIONS), direction),
            key="oracle_pulse_direction",
        )
    vec = sys.unobserved_direction() if direction == "unobserved" else None
    if vec is None:
        vec = sys.observed_direction()
    return Pulse(int(time), float(magnitude), vec)


def fit_decay_ratio(excess, start, steps=5):
    """Per-step geometric ratio of ``excess[start:start + steps]`` from a
    least-squares line through its logarithm."""
    window = np.asarray(excess[start : start + steps], dtype=np.float64)
    window = window[window > 0]
    if window.size < 2:
        return 0.0
    slope = np.polyfit(np.arange(window.size), np.log(window), 1)[0]
    return float(np.exp(slope))


def recursion_slack(sys, stats, e0=0.0):
    """``rho E_{t-1} + l_x E||x^_t - x_t|| + eps_f - E_t`` per step, with
    ``E_0 = e0`` (the initial offset passed to :func:`simulate`). Holds
    rollout by rollout, so it is non-negative up to rounding."""
    prev = np.concatenate([[e0], stats.e_hat[:-1]])
    return sys.rho * prev + sys.lx * stats.obs_gap + sys.eps_f - stats.e_hat


def sweep_kappa(kappas, base, horizon, rollouts, seed=0):
    """One :func:`simulate` run per kappa, with ``l_x = kappa (1 - rho) / L_P``.

    ``base`` holds the remaining :func:`build_oracle` arguments. Returns a
    frame with columns ``kappa, l_x, plateau, bound, stable``; entries with
    kappa >= 1 are simulated and marked unstable.
    """
    kappas = list(kappas)
    if not kappas:
        raise ConfigurationError("need at least one kappa", key="kappa_grid")
    rho, lp = base["rho"], base["lp"]
    if not lp > 0:
        raise ConfigurationError("L_P must be positive for a kappa sweep", key="oracle_lp")
    rows = []
    for k in kappas:
        lx = k * (1.0 - rho) / lp
        params = dict(base, lx=lx)
        e0 = params.pop("e0", 0.0)
        sys = build_oracle(seed=seed, **params)
        stats = simulate(sys, horizon, rollouts, e0=e0, seed=seed)
        stable = k < 1
        if not stable:
            logger.warning("kappa=%s is not contracting; simulated as a divergence demo", k)
        rows.append(
            {
                "kappa": k,
                "l_x": lx,
                "plateau": stats.plateau(),
                "bound": sys.bound(e0),
                "stable": stable,
            }
        )
    return pd.DataFrame(rows, columns=["kappa", "l_x", "plateau", "bound", "stable"])
