"""Noise schedules on t in [0, 1] and the time samplers used by the distillation loop.

The forward process is the variance-preserving SDE

    dX = -0.5 * beta(t) * X dt + sqrt(beta(t)) dW

and every derived quantity (accumulated variances, signal level, bridge
interpolation coefficients) is a function of the integrated rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import integrate

from tracelab import _rng
from tracelab.errors import ConfigError, DomainError, NumericError

QUAD_TOL = 1e-10


def _check_t(t, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < lo) or np.any(arr > hi):
        raise DomainError(f"t must lie in [{lo}, {hi}], got {t!r}")
    return arr


def _out(arr: np.ndarray, like):
    return float(arr) if np.ndim(like) == 0 else arr


@dataclass(frozen=True)
class NoiseSchedule:
    """Rate function beta(t) on the unit horizon.

    ``linear`` ramps from ``beta_min`` to ``beta_max``; ``cosine`` eases between
    them as ``beta_min + (beta_max - beta_min) * (1 - cos(pi t)) / 2`` and is
    integrated by adaptive quadrature.
    """

    kind: Literal["linear", "cosine"] = "linear"
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not (0 < self.beta_min <= self.beta_max) or not math.isfinite(self.beta_max):
            raise ConfigError("need 0 < beta_min <= beta_max < inf")

    def beta(self, t):
        arr = _check_t(t)
        if self.kind == "linear":
            val = self.beta_min + (self.beta_max - self.beta_min) * arr
        else:
            val = self.beta_min + (self.beta_max - self.beta_min) * 0.5 * (1.0 - np.cos(np.pi * arr))
        return _out(val, t)

    def _integral(self, a: float, b: float) -> float:
        if self.kind == "linear":
            lin = lambda s: self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s
            return lin(b) - lin(a)
        val, err = integrate.quad(lambda s: self.beta(s), a, b, epsabs=QUAD_TOL, epsrel=0.0, limit=200)
        if not np.isfinite(val) or err > QUAD_TOL:
            raise NumericError(f"quadrature of beta over [{a}, {b}] did not converge (err={err:g})")
        return val

    @property
    def total(self) -> float:
        """Integral of beta over [0, 1]."""
        return self._integral(0.0, 1.0)

    def accumulated_variances(self, t):
        """Return ``(sigma2, sigma_bar2)``: the integrals of beta over [0, t] and [t, 1]."""
        arr = _check_t(t)
        if self.kind == "linear":
            s2 = self.beta_min * arr + 0.5 * (self.beta_max - self.beta_min) * arr * arr
            sb2 = self.total - s2
            sb2 = np.where(arr == 1.0, 0.0, sb2)
        else:
            flat = arr.reshape(-1)
            s2 = np.array([self._integral(0.0, s) for s in flat]).reshape(arr.shape)
            sb2 = np.array([self._integral(s, 1.0) for s in flat]).reshape(arr.shape)
        return _out(s2, t), _out(sb2, t)

    def sigma2(self, t):
        return self.accumulated_variances(t)[0]

    def alpha_bar(self, t):
        """Signal level exp(-int_0^t beta) of the VP process."""
        s2, _ = self.accumulated_variances(t)
        return _out(np.exp(-np.asarray(s2)), t)

    def bridge_coefficients(self, t):
        """Return ``(gamma, big_sigma)`` of the bridge posterior at time t.

        gamma = sigma_bar2 / (sigma2 + sigma_bar2) weights the t=0 endpoint and
        big_sigma = sigma2 * sigma_bar2 / (sigma2 + sigma_bar2) is the per-coordinate variance.
        """
        s2, sb2 = self.accumulated_variances(t)
        s2, sb2 = np.asarray(s2), np.asarray(sb2)
        tot = s2 + sb2
        gamma = sb2 / tot
        big_sigma = s2 * sb2 / tot
        return _out(gamma, t), _out(big_sigma, t)

    def inverse_sigma2(self, level: float) -> float:
        """Time t at which sigma2(t) equals ``level``."""
        tot = self.total
        if not 0.0 <= level <= tot:
            raise DomainError(f"level {level} outside [0, {tot}]")
        if self.kind == "linear":
            a = 0.5 * (self.beta_max - self.beta_min)
            b = self.beta_min
            if a == 0:
                return level / b
            return (-b + math.sqrt(b * b + 4 * a * level)) / (2 * a)
        from scipy.optimize import brentq

        return brentq(lambda s: self._integral(0.0, s) - level, 0.0, 1.0, xtol=1e-14)


SamplerMode = Literal["uniform", "annealed", "two_stage"]


@dataclass(frozen=True)
class TimeSampler:
    """Draws diffusion / bridge times per optimisation iteration.

    Draws are a pure function of ``(rng_seed, iteration)``, so repeated calls
    for the same iteration return the same values.

    * ``uniform``: U[lo, hi]
    * ``annealed``: U[lo, hi_eff] with hi_eff shrinking linearly from ``hi`` to
      ``lo + anneal_floor`` over ``total_iterations``
    * ``two_stage``: U[lo, hi] before ``stage_boundary``, U[lo, hi_late] after
    """

    mode: SamplerMode = "uniform"
    lo: float = 0.02
    hi: float = 0.5
    stage_boundary: int = 700
    total_iterations: int = 1700
    rng_seed: int = 0
    hi_late: float = 0.5
    anneal_floor: float = 0.01

    def __post_init__(self):
        if self.mode not in ("uniform", "annealed", "two_stage"):
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ConfigError("need 0 <= lo < hi <= 1")
        if self.mode == "two_stage" and not self.lo < self.hi_late <= 1.0:
            raise ConfigError("need lo < hi_late <= 1")
        if self.mode == "annealed" and self.lo + self.anneal_floor > self.hi:
            raise ConfigError("anneal floor wider than the sampling window")

    def window(self, iteration: int) -> tuple[float, float]:
        if self.mode == "uniform":
            return self.lo, self.hi
        if self.mode == "two_stage":
            return self.lo, self.hi if iteration < self.stage_boundary else self.hi_late
        if self.total_iterations <= 1:
            frac = 1.0
        else:
            frac = min(max(iteration, 0), self.total_iterations - 1) / (self.total_iterations - 1)
        top = self.hi - (self.hi - (self.lo + self.anneal_floor)) * frac
        return self.lo, top

    def sample(self, iteration: int, size: int | None = None):
        lo, hi = self.window(iteration)
        rng = _rng.stream(self.rng_seed, iteration)
        return rng.uniform(lo, hi, size=size)


def sample_t(sampler: TimeSampler, iteration: int, size: int | None = None):
    """Bridge time t for the given iteration."""
    return sampler.sample(iteration, size)


def sample_t_prime(sampler: TimeSampler, iteration: int, size: int | None = None):
    """Denoising time t' for the given iteration; ``sampler`` must be two-stage."""
    if sampler.mode != "two_stage":
        raise ConfigError("t' sampling expects a two_stage sampler")
    return sampler.sample(iteration, size)


def two_stage_sampler(rng_seed: int = 0, stage_boundary: int = 700, total_iterations: int = 1700) -> TimeSampler:
    return TimeSampler(
        mode="two_stage",
        lo=0.02,
        hi=0.7,
        hi_late=0.5,
        stage_boundary=stage_boundary,
        total_iterations=total_iterations,
        rng_seed=rng_seed,
    )
