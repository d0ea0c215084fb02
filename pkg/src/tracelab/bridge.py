"""Closed-form bridge posterior between two pinned endpoints, plus the Gaussian-noise
special case where the forward Schrodinger factor is identically one.

Endpoint convention: ``x_target`` sits at bridge time 0, ``x_source`` at time 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from tracelab import _rng
from tracelab.errors import ConfigError, DomainError
from tracelab.schedule import NoiseSchedule
from tracelab.score import GmmDistribution

# stiff drift near t=1 (sigma_bar2 -> 0): the pinned SDE is integrated up to here
BRIDGE_T_STOP = 1.0 - 1e-3

_BRIDGE_TAG = 3


@dataclass(frozen=True)
class BridgeEndpoints:
    x_target: np.ndarray
    x_source: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.x_target, dtype=float)
        b = np.asarray(self.x_source, dtype=float)
        if a.shape != b.shape:
            raise DomainError(f"endpoint shapes differ: {a.shape} vs {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DomainError("non-finite endpoint")
        object.__setattr__(self, "x_target", a)
        object.__setattr__(self, "x_source", b)


@dataclass(frozen=True)
class BridgePosteriorParams:
    mu: np.ndarray
    big_sigma: np.ndarray | float
    sigma_t: np.ndarray | float


def _col(v, like: np.ndarray):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim)) if v.ndim else v


def posterior_params(endpoints: BridgeEndpoints, sched: NoiseSchedule, t) -> BridgePosteriorParams:
    """Mean gamma_t * x_target + (1 - gamma_t) * x_source and isotropic variance big_sigma_t.

    ``t`` may be a scalar or one time per row of batched endpoints.
    """
    gamma, big_sigma = sched.bridge_coefficients(t)
    s2 = sched.sigma2(t)
    g = _col(gamma, endpoints.x_target)
    mu = g * endpoints.x_target + (1.0 - g) * endpoints.x_source
    return BridgePosteriorParams(mu, big_sigma, np.sqrt(s2))


def posterior_sample(endpoints: BridgeEndpoints, sched: NoiseSchedule, t, rng: np.random.Generator, z=None):
    """Draw x_t = mu_t + sqrt(big_sigma_t) * z; returns ``(x_t, z)``.

    At t in {0, 1} the variance is exactly zero, so the endpoints come back unchanged.
    """
    params = posterior_params(endpoints, sched, t)
    if z is None:
        z = rng.standard_normal(params.mu.shape)
    x_t = params.mu + _col(np.sqrt(params.big_sigma), params.mu) * z
    return x_t, z


@dataclass(frozen=True)
class SchrodingerFactors:
    """Forward factor ``psi``, backward factor ``psi_hat`` and marginal density ``marginal``.

    Each is a callable ``(x, t) -> density``; ``grad_log_psi_hat`` gives the
    backward factor's log-gradient.
    """

    psi: Callable[[np.ndarray, float], np.ndarray]
    psi_hat: Callable[[np.ndarray, float], np.ndarray]
    marginal: Callable[[np.ndarray, float], np.ndarray]
    grad_log_psi_hat: Callable[[np.ndarray, float], np.ndarray]


def degenerate_factors(p: GmmDistribution, sched: NoiseSchedule) -> SchrodingerFactors:
    """Factors of the bridge whose t=1 end is (approximately) standard normal.

    Psi is identically one, so Psi_hat must equal the diffused data density.
    Psi_hat and its gradient are evaluated by direct summation of component
    densities, independently of the log-sum-exp score path in ``score``.
    """
    if sched.alpha_bar(1.0) >= 1e-3:
        raise ConfigError(
            f"alpha_bar(1) = {sched.alpha_bar(1.0):.3g}; the t=1 marginal is not close to N(0, I)"
        )

    def _components(x, t):
        a = sched.alpha_bar(float(t))
        means = np.sqrt(a) * p.means
        var = a * p.variances + (1.0 - a)
        diff = np.asarray(x, dtype=float)[..., None, :] - means
        dens = np.prod(np.exp(-0.5 * diff * diff / var) / np.sqrt(2 * np.pi * var), axis=-1)
        return p.weights * dens, diff, var

    def psi(x, t):
        return np.ones(np.asarray(x).shape[:-1])

    def psi_hat(x, t):
        wd, _, _ = _components(x, t)
        return wd.sum(axis=-1)

    def grad_log_psi_hat(x, t):
        wd, diff, var = _components(x, t)
        grad = np.sum(wd[..., None] * (-diff / var), axis=-2)
        return grad / wd.sum(axis=-1)[..., None]

    def marginal(x, t):
        return p.diffused(sched, float(t)).pdf(x)

    return SchrodingerFactors(psi, psi_hat, marginal, grad_log_psi_hat)


def sb_backward_drift(factors: SchrodingerFactors, sched: NoiseSchedule, x, t: float) -> np.ndarray:
    """Backward drift f - beta * grad log Psi_hat with f = -beta x / 2."""
    b = sched.beta(t)
    return -0.5 * b * np.asarray(x, dtype=float) - b * factors.grad_log_psi_hat(x, t)


def duality_residual(factors: SchrodingerFactors, x, t: float) -> np.ndarray:
    return factors.psi(x, t) * factors.psi_hat(x, t) - factors.marginal(x, t)


@dataclass(frozen=True)
class BridgePath:
    """Ensembles of the pinned SDE recorded at ``times`` (last entry is the stop time)."""

    times: tuple[float, ...]
    samples: tuple[np.ndarray, ...]

    def at(self, t: float) -> np.ndarray:
        for s, arr in zip(self.times, self.samples):
            if abs(s - t) < 1e-12:
                return arr
        raise KeyError(t)


def simulate_bridge_sde(
    endpoints: BridgeEndpoints,
    sched: NoiseSchedule,
    n_steps: int,
    n_paths: int,
    seed: int = 0,
    checkpoints: tuple[float, ...] = (0.25, 0.5, 0.75),
    t_stop: float = BRIDGE_T_STOP,
) -> BridgePath:
    """Simulate dX = beta (x_source - X) / sigma_bar2 dt + sqrt(beta) dW from x_target at t=0.

    Steps use the integrated rate over each interval (an Euler-Maruyama step in
    the time change tau = sigma2(t)), on a grid uniform in tau with the
    checkpoints inserted. The endpoint geometry never goes through the
    closed-form gamma / big_sigma.
    """
    if n_steps < 100:
        raise DomainError("n_steps must be >= 100")
    if not 0.0 < t_stop < 1.0:
        raise DomainError("t_stop must lie in (0, 1)")
    total = sched.total
    tau_stop = sched.sigma2(t_stop)
    grid_t = np.array([sched.inverse_sigma2(v) for v in np.linspace(0.0, tau_stop, n_steps + 1)])
    grid_t[-1] = t_stop
    cps = tuple(float(c) for c in checkpoints if 0.0 < c < t_stop)
    grid_t = np.union1d(grid_t, np.array(cps))
    taus = np.asarray(sched.sigma2(grid_t))

    x0 = np.broadcast_to(endpoints.x_target, (n_paths,) + endpoints.x_target.shape).copy()
    x1 = endpoints.x_source
    x = x0
    streams = _rng.block_streams(seed, n_paths, _BRIDGE_TAG)
    recorded: dict[float, np.ndarray] = {}
    for k in range(len(grid_t) - 1):
        dtau = taus[k + 1] - taus[k]
        remaining = total - taus[k]
        for sl, rng in streams:
            z = rng.standard_normal(x[sl].shape)
            x[sl] += (x1 - x[sl]) * (dtau / remaining) + np.sqrt(dtau) * z
        t_next = float(grid_t[k + 1])
        for c in cps:
            if abs(c - t_next) < 1e-12:
                recorded[c] = x.copy()
    times = cps + (float(t_stop),)
    return BridgePath(times, tuple(recorded[c] for c in cps) + (x.copy(),))
