"""Contraction bounds for the latent transition and their enforcement.

The transition is a GRU cell ``h' = f(h, x)``. With gate activations kept
inside ``z in [z_min, z_max]``, ``r <= r_max`` and ``||h||_inf <= 1``, its
Jacobians satisfy

    ||df/dh|| <= (1 - z_min) + ||U_z||/2 + z_max ||U_h|| (r_max + ||U_r||/4)
    ||df/dx|| <= ||W_z||/2 + z_max (||W_h|| + ||U_h|| ||W_r||/4)

and the multi-step forecast error stays bounded whenever
``kappa = L_P * L_x / (1 - rho) < 1``.
"""
import logging
from collections import namedtuple

import numpy as np

from cdlf.diffusion import sample_next
from cdlf.errors import (
    ConfigurationError,
    EnforcementInfeasibleError,
    InvalidGateRangeError,
    StabilityMarginError,
)
from cdlf.numerics import GruParams, gru_forward, spectral_clip, spectral_norm

logger = logging.getLogger("cdlf.stability")

# keeps strict inequalities strict after rescaling
SHRINK_MARGIN = 1.0 - 1e-9
RECURRENT_SHARE = 0.5
_GATE_EDGE = 1e-12


class GateRanges(namedtuple("GateRanges", ["z_min", "z_max", "r_max", "h_inf"])):
    __slots__ = ()

    def __new__(cls, z_min, z_max, r_max, h_inf=1.0):
        return super(GateRanges, cls).__new__(cls, z_min, z_max, r_max, h_inf)

    def validate(self):
        if not 0 < self.z_min <= self.z_max < 1:
            raise InvalidGateRangeError(
                "need 0 < z_min <= z_max < 1, got {} and {}".format(self.z_min, self.z_max),
                key="gate_ranges",
            )
        if not 0 <= self.r_max < 1:
            raise InvalidGateRangeError(
                "need 0 <= r_max < 1, got {}".format(self.r_max), key="gate_ranges"
            )
        return self

    def widen(self, fraction):
        """Moves every edge outward by ``fraction`` of its distance to the
        boundary of the unit interval."""
        return GateRanges(
            z_min=self.z_min * (1.0 - fraction),
            z_max=self.z_max + fraction * (1.0 - self.z_max),
            r_max=self.r_max + fraction * (1.0 - self.r_max),
            h_inf=self.h_inf,
        )


def _input_block(W, obs_dims):
    return W if obs_dims is None else W[:, :obs_dims]


def gru_bound_rho(p, g, iters=1000, tol=1e-13):
    g.validate()
    return (
        (1.0 - g.z_min)
        + 0.5 * spectral_norm(p.U_z, iters, tol)
        + g.z_max
        * spectral_norm(p.U_h, iters, tol)
        * (g.r_max + 0.25 * spectral_norm(p.U_r, iters, tol))
    )


def gru_bound_lx(p, g, obs_dims=None, iters=1000, tol=1e-13):
    """Input-Lipschitz bound. With ``obs_dims`` only the first ``obs_dims``
    input columns (the observation part of ``[x; c]``) are considered."""
    g.validate()
    W_z, W_r, W_h = (_input_block(W, obs_dims) for W in (p.W_z, p.W_r, p.W_h))
    return 0.5 * spectral_norm(W_z, iters, tol) + g.z_max * (
        spectral_norm(W_h, iters, tol)
        + 0.25 * spectral_norm(p.U_h, iters, tol) * spectral_norm(W_r, iters, tol)
    )


def kappa(rho, lx, lp):
    if rho >= 1:
        raise StabilityMarginError(
            "contraction margin violated: rho={:.6g} >= 1, the error bound does not hold".format(rho)
        )
    return lp * lx / (1.0 - rho)


Verdict = namedtuple("Verdict", ["passed", "rho_margin", "coupling_margin"])


def check_sufficient(rho_bar, lx_bar, lp):
    """``rho_bar < 1`` and ``lp * lx_bar < 1 - rho_bar``, both strict."""
    rho_margin = 1.0 - rho_bar
    coupling_margin = rho_margin - lp * lx_bar
    return Verdict(rho_margin > 0 and coupling_margin > 0, rho_margin, coupling_margin)


EmpiricalMeasure = namedtuple("EmpiricalMeasure", ["rho_hat", "lx_hat", "gates", "states"])


def measure_empirical(p, states, fd_step=1e-5, obs_dims=None, iters=1000, tol=1e-13):
    """Largest Jacobian norms of the cell over visited ``(h, x)`` states.

    Jacobians are taken by central differences with step ``fd_step``; gate
    ranges are the extremes of ``z`` and ``r`` at the unperturbed states.
    """
    states = list(states)
    if not states:
        raise ConfigurationError("need at least one state", key="states")
    m = p.hidden_size
    n_in = p.input_size if obs_dims is None else obs_dims
    rho_hat = lx_hat = 0.0
    z_lo, z_hi, r_hi, h_inf = 1.0, 0.0, 0.0, 0.0
    eye_h = fd_step * np.eye(m)
    eye_x = fd_step * np.eye(p.input_size)[:n_in]
    for h, x in states:
        h = np.asarray(h, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        _, gates = gru_forward(h, x, p)
        z_lo = min(z_lo, float(gates.z.min()))
        z_hi = max(z_hi, float(gates.z.max()))
        r_hi = max(r_hi, float(gates.r.max()))
        h_inf = max(h_inf, float(np.abs(h).max()))

        plus, _ = gru_forward(h + eye_h, np.tile(x, (m, 1)), p)
        minus, _ = gru_forward(h - eye_h, np.tile(x, (m, 1)), p)
        jac_h = ((plus - minus) / (2.0 * fd_step)).T
        plus, _ = gru_forward(np.tile(h, (n_in, 1)), x + eye_x, p)
        minus, _ = gru_forward(np.tile(h, (n_in, 1)), x - eye_x, p)
        jac_x = ((plus - minus) / (2.0 * fd_step)).T
        rho_hat = max(rho_hat, spectral_norm(jac_h, iters, tol))
        lx_hat = max(lx_hat, spectral_norm(jac_x, iters, tol))

    gates = GateRanges(
        z_min=max(z_lo, _GATE_EDGE),
        z_max=min(z_hi, 1.0 - _GATE_EDGE),
        r_max=min(r_hi, 1.0 - _GATE_EDGE),
        h_inf=h_inf,
    )
    return EmpiricalMeasure(rho_hat, lx_hat, gates, len(states))


Action = namedtuple("Action", ["block", "scale", "rho_bar", "lx_bar"])


def _shrink(M, scale, iters, tol):
    sigma = spectral_norm(M, iters, tol)
    if scale >= 1 or sigma == 0:
        return M
    return spectral_clip(M, scale * sigma, iters, tol)


def _scaled(p, names, scale, obs_dims=None, iters=1000, tol=1e-13):
    updates = {}
    for name in names:
        M = getattr(p, name)
        if name in GruParams.INPUT and obs_dims is not None:
            M = M.copy()
            M[:, :obs_dims] = _shrink(M[:, :obs_dims], scale, iters, tol)
        else:
            M = _shrink(M, scale, iters, tol)
        updates[name] = M
    return p._replace(**updates)


def enforce(p, target_kappa, lp, g, obs_dims=None, min_scale=1e-3, iters=1000, tol=1e-13):
    """Shrinks the cell's weights until the sufficient condition holds with
    ``kappa_bar <= target_kappa``.

    The recurrent matrices are shrunk first, by one common factor, until
    ``rho_bar`` is at most ``(1 - z_min) + z_min / 2``; the input matrices are
    then shrunk by one common factor until ``lp * lx_bar <= target_kappa *
    (1 - rho_bar)``. Parameters that already satisfy the target are returned
    unchanged.

    Returns the new parameters and the list of :class:`Action` taken. Raises
    :class:`EnforcementInfeasibleError` when either factor would fall below
    ``min_scale``.
    """
    if not 0 < target_kappa < 1:
        raise ConfigurationError(
            "must lie in (0, 1), got {}".format(target_kappa), key="target_kappa"
        )
    g.validate()
    actions = []
    rho_bar = gru_bound_rho(p, g, iters, tol)
    lx_bar = gru_bound_lx(p, g, obs_dims, iters, tol)
    if _meets_target(rho_bar, lx_bar, lp, target_kappa):
        return p, actions

    floor = 1.0 - g.z_min
    rho_goal = floor + RECURRENT_SHARE * g.z_min
    if rho_bar > rho_goal:
        a = 0.5 * spectral_norm(p.U_z, iters, tol)
        u_h = spectral_norm(p.U_h, iters, tol)
        b = g.z_max * u_h * g.r_max
        c = 0.25 * g.z_max * u_h * spectral_norm(p.U_r, iters, tol)
        gap = rho_goal - floor
        if c > 0:
            s = (-(a + b) + np.sqrt((a + b) ** 2 + 4.0 * c * gap)) / (2.0 * c)
        else:
            s = gap / (a + b)
        s = min(1.0, s * SHRINK_MARGIN)
        if s < min_scale:
            raise EnforcementInfeasibleError(
                "recurrent weights would need scale {:.3g} < {}".format(s, min_scale), actions
            )
        p = _scaled(p, GruParams.RECURRENT, s, iters=iters, tol=tol)
        rho_bar = gru_bound_rho(p, g, iters, tol)
        lx_bar = gru_bound_lx(p, g, obs_dims, iters, tol)
        actions.append(Action("recurrent", float(s), rho_bar, lx_bar))
        logger.info("Shrunk recurrent weights by %.4g, rho_bar=%.4g", s, rho_bar)

    if not _meets_target(rho_bar, lx_bar, lp, target_kappa):
        allowed = target_kappa * (1.0 - rho_bar)
        t = min(1.0, allowed / (lp * lx_bar)) * SHRINK_MARGIN
        if t < min_scale:
            raise EnforcementInfeasibleError(
                "input weights would need scale {:.3g} < {}".format(t, min_scale), actions
            )
        p = _scaled(p, GruParams.INPUT, t, obs_dims, iters, tol)
        rho_bar = gru_bound_rho(p, g, iters, tol)
        lx_bar = gru_bound_lx(p, g, obs_dims, iters, tol)
        actions.append(Action("input", float(t), rho_bar, lx_bar))
        logger.info("Shrunk input weights by %.4g, lx_bar=%.4g", t, lx_bar)

    if not _meets_target(rho_bar, lx_bar, lp, target_kappa):
        raise EnforcementInfeasibleError(
            "target kappa {} not reached (rho_bar={:.4g}, lx_bar={:.4g})".format(
                target_kappa, rho_bar, lx_bar
            ),
            actions,
        )
    return p, actions


def _meets_target(rho_bar, lx_bar, lp, target_kappa):
    if not check_sufficient(rho_bar, lx_bar, lp).passed:
        return False
    return kappa(rho_bar, lx_bar, lp) <= target_kappa


class StabilityReport(object):
    """Bounds, measurements and verdict for one transition cell.

    ``lp_source`` is ``"user"`` when ``lp`` was supplied and ``"proxy"`` when
    it came from :func:`lp_proxy` (a heuristic).
    """

    def __init__(self, rho_bar, lx_bar, rho_hat, lx_hat, lp, gates, lp_source="user", actions=None):
        self.rho_bar = rho_bar
        self.lx_bar = lx_bar
        self.rho_hat = rho_hat
        self.lx_hat = lx_hat
        self.lp = lp
        self.lp_source = lp_source
        self.gates = gates
        self.actions = list(actions or [])
        self.verdict = check_sufficient(rho_bar, lx_bar, lp)

    @property
    def kappa_bar(self):
        return None if self.rho_bar >= 1 else kappa(self.rho_bar, self.lx_bar, self.lp)

    @property
    def kappa_hat(self):
        return None if self.rho_hat >= 1 else kappa(self.rho_hat, self.lx_hat, self.lp)

    def to_dict(self):
        return {
            "rho_bar": self.rho_bar,
            "lx_bar": self.lx_bar,
            "rho_hat": self.rho_hat,
            "lx_hat": self.lx_hat,
            "lp": self.lp,
            "lp_source": self.lp_source,
            "kappa_bar": self.kappa_bar,
            "kappa_hat": self.kappa_hat,
            "passed": bool(self.verdict.passed),
            "rho_margin": self.verdict.rho_margin,
            "coupling_margin": self.verdict.coupling_margin,
            "gates": dict(self.gates._asdict()),
            "actions": [dict(a._asdict()) for a in self.actions],
        }


def stability_report(
    p,
    states,
    lp,
    obs_dims=None,
    fd_step=1e-5,
    widening=0.0,
    lp_source="user",
    actions=None,
    iters=1000,
    tol=1e-13,
):
    """Measures ``p`` on ``states`` and evaluates the bounds at the measured
    gate ranges, optionally widened."""
    measured = measure_empirical(p, states, fd_step, obs_dims, iters, tol)
    gates = measured.gates.widen(widening) if widening else measured.gates
    return StabilityReport(
        rho_bar=gru_bound_rho(p, gates, iters, tol),
        lx_bar=gru_bound_lx(p, gates, obs_dims, iters, tol),
        rho_hat=measured.rho_hat,
        lx_hat=measured.lx_hat,
        lp=lp,
        gates=gates,
        lp_source=lp_source,
        actions=actions,
    )


def lp_proxy(params, config, sched, probes, samples, rng):
    """Heuristic Lipschitz constant of the one-step generator in ``h``.

    For each probe ``(h, h_other, history)`` both states draw ``samples``
    next observations from identical random streams; the ratio of the
    sample-mean shift to ``||h - h_other||`` is maximised over probes.
    """
    best = 0.0
    for i, (h, h_other, history) in enumerate(probes):
        dist = float(np.linalg.norm(np.asarray(h) - np.asarray(h_other)))
        if dist == 0:
            continue
        probe_rng = rng.spawn(i)
        hist = np.tile(np.asarray(history, dtype=np.float64), (samples, 1, 1))
        x = sample_next(
            np.tile(h, (samples, 1)), hist, params, sched,
            [probe_rng.spawn(j) for j in range(samples)], config,
        )
        x_other = sample_next(
            np.tile(h_other, (samples, 1)), hist, params, sched,
            [probe_rng.spawn(j) for j in range(samples)], config,
        )
        shift = float(np.linalg.norm(x.mean(axis=0) - x_other.mean(axis=0)))
        best = max(best, shift / dist)
    return best
