"""Analytic target distributions and noise predictors.

Gaussian mixtures with diagonal covariances stay Gaussian mixtures under the
VP forward process: component means scale by sqrt(alpha_bar) and variances
become alpha_bar * var + (1 - alpha_bar). That gives exact noisy scores, which
stand in for a pretrained diffusion prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from tracelab.errors import ConfigError, DomainError
from tracelab.schedule import NoiseSchedule

# ``None`` selects the unconditional prior
Condition = Optional[int]

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class GmmDistribution:
    """Mixture of axis-aligned Gaussians.

    Attributes:
        weights: (K,) mixing probabilities.
        means: (K, d) component means.
        variances: (K, d) per-coordinate component variances.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        k = w.shape[0]
        m = np.asarray(self.means, dtype=float).reshape(k, -1)
        v = np.asarray(self.variances, dtype=float)
        # scalar, per-component, or full (K, d) variances
        v = np.full(m.shape, float(v)) if v.ndim == 0 else np.broadcast_to(v.reshape(k, -1), m.shape).copy()
        if abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights sum to {w.sum()!r}, expected 1")
        if np.any(w < 0):
            raise ConfigError("negative mixture weight")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ConfigError("component variances must be positive and finite")
        for name, arr in (("weights", w), ("means", m), ("variances", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_components(cls, components: Sequence[tuple[float, Sequence[float], Sequence[float]]]) -> GmmDistribution:
        """Build from ``(weight, mean, diag_variance)`` triples."""
        weights = [c[0] for c in components]
        means = [np.atleast_1d(np.asarray(c[1], dtype=float)) for c in components]
        variances = [np.broadcast_to(np.asarray(c[2], dtype=float), means[i].shape) for i, c in enumerate(components)]
        return cls(np.asarray(weights, dtype=float), np.stack(means), np.stack(variances))

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def components(self) -> list[tuple[float, list[float], list[float]]]:
        return [(float(w), m.tolist(), v.tolist()) for w, m, v in zip(self.weights, self.means, self.variances)]

    def diffused(self, sched: NoiseSchedule, t: float) -> GmmDistribution:
        """Marginal of the VP process at time t started from this mixture."""
        a = sched.alpha_bar(float(t))
        return GmmDistribution(self.weights, np.sqrt(a) * self.means, a * self.variances + (1.0 - a))

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dimension:
            raise DomainError(f"expected trailing dimension {self.dimension}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite input")
        return x

    def _component_logpdf(self, x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
        diff = x[..., None, :] - means
        return -0.5 * np.sum(diff * diff / variances + np.log(variances) + LOG_2PI, axis=-1)

    def log_prob(self, x) -> np.ndarray:
        x = self._check_x(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(logw + self._component_logpdf(x, self.means, self.variances), axis=-1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.log_prob(x))

    def score(self, x) -> np.ndarray:
        """Clean-data score grad_x log p(x), responsibility-weighted and log-sum-exp stabilised."""
        x = self._check_x(x)
        return _mixture_score(x, self.weights, self.means, self.variances)

    def noisy_score(self, sched: NoiseSchedule, x, t) -> np.ndarray:
        """Exact score of the diffused mixture; ``t`` may be a scalar or one time per row of ``x``."""
        x = self._check_x(x)
        a = np.asarray(sched.alpha_bar(t), dtype=float)
        if a.ndim:
            a = a.reshape(a.shape + (1, 1))
        means = np.sqrt(a) * self.means
        variances = a * self.variances + (1.0 - a)
        return _mixture_score(x, self.weights, means, variances)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dimension))
        return self.means[idx] + np.sqrt(self.variances[idx]) * z


def _mixture_score(x: np.ndarray, weights, means, variances) -> np.ndarray:
    # means / variances are (K, d) or broadcast to (..., K, d)
    diff = x[..., None, :] - means
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    logc = logw - 0.5 * np.sum(diff * diff / variances + np.log(variances), axis=-1)
    resp = np.exp(logc - logsumexp(logc, axis=-1, keepdims=True))
    return np.sum(resp[..., None] * (-diff / variances), axis=-2)


def gmm_clean_score(p: GmmDistribution, x) -> np.ndarray:
    return p.score(x)


def gmm_noisy_score(p: GmmDistribution, sched: NoiseSchedule, x, t) -> np.ndarray:
    return p.noisy_score(sched, x, t)


@dataclass(frozen=True)
class GmmFamily:
    """Registry of conditional mixtures; condition ``y`` indexes ``members``.

    The unconditional distribution is the equal-weight mixture over all members.
    """

    members: tuple[GmmDistribution, ...]
    unconditional: GmmDistribution = field(init=False, repr=False)

    def __post_init__(self):
        if not self.members:
            raise ConfigError("empty GMM family")
        dims = {m.dimension for m in self.members}
        if len(dims) != 1:
            raise ConfigError(f"members disagree on dimension: {sorted(dims)}")
        k = len(self.members)
        uncond = GmmDistribution(
            np.concatenate([m.weights / k for m in self.members]),
            np.concatenate([m.means for m in self.members]),
            np.concatenate([m.variances for m in self.members]),
        ) if k > 1 else self.members[0]
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "unconditional", uncond)

    @property
    def dimension(self) -> int:
        return self.members[0].dimension

    def __len__(self) -> int:
        return len(self.members)

    def condition(self, y: Condition) -> GmmDistribution:
        if y is None:
            return self.unconditional
        if not 0 <= int(y) < len(self.members):
            raise DomainError(f"condition {y} outside registry of size {len(self.members)}")
        return self.members[int(y)]


def ring_gmm(n: int = 8, radius: float = 3.0, var: float = 0.1, dim: int = 2) -> GmmDistribution:
    ang = 2 * np.pi * np.arange(n) / n
    means = np.zeros((n, dim))
    means[:, 0] = radius * np.cos(ang)
    means[:, 1] = radius * np.sin(ang)
    return GmmDistribution(np.full(n, 1.0 / n), means, np.full((n, dim), var))


def bimodal_gmm(offset=(1.5, 1.5), var: float = 0.25) -> GmmDistribution:
    off = np.asarray(offset, dtype=float)
    return GmmDistribution(np.array([0.5, 0.5]), np.stack([-off, off]), np.full((2, off.size), var))


TOY_OFFSET = (4.5, 4.5)


def default_family() -> GmmFamily:
    """Condition 0: eight-component ring of radius 3; condition 1: bimodal pair outside it.

    The pair sits well clear of the ring so the class posterior saturates near
    its modes; with the pair nested inside the ring, guidance points inward and
    the guided denoiser maps the conditional modes toward the origin.
    """
    return GmmFamily((ring_gmm(), bimodal_gmm(TOY_OFFSET)))


def eps_from_score(score, sched: NoiseSchedule, t):
    """Noise prediction equivalent to a score: eps = -sqrt(1 - alpha_bar) * score."""
    a = np.asarray(sched.alpha_bar(t), dtype=float)
    if np.any(a >= 1.0):
        raise DomainError("noise scale vanishes at t=0")
    scale = np.sqrt(1.0 - a)
    return -_col(scale, score) * np.asarray(score, dtype=float)


def score_from_eps(eps, sched: NoiseSchedule, t):
    a = np.asarray(sched.alpha_bar(t), dtype=float)
    if np.any(a >= 1.0):
        raise DomainError("noise scale vanishes at t=0")
    scale = np.sqrt(1.0 - a)
    return -np.asarray(eps, dtype=float) / _col(scale, eps)


def _col(v: np.ndarray, like) -> np.ndarray:
    # per-row scalars broadcast against (N, d) arrays
    v = np.asarray(v)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim)) if v.ndim else v


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """Classifier-free guidance: eps_u + w * (eps_c - eps_u)."""
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    if eps_cond.shape != eps_uncond.shape:
        raise DomainError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


class ScoreModel(Protocol):
    """Anything that predicts the noise in ``x`` at time ``t``.

    ``x`` is (N, d); ``t`` is a scalar or (N,); ``view`` is ignored by analytic models.
    """

    dimension: int

    def epsilon(self, x, t, y: Condition = None, view=None) -> np.ndarray: ...


@dataclass(frozen=True)
class AnalyticScore:
    """Exact noise predictor for a GMM family under a VP schedule."""

    family: GmmFamily
    schedule: NoiseSchedule

    @property
    def dimension(self) -> int:
        return self.family.dimension

    def score(self, x, t, y: Condition = None) -> np.ndarray:
        return self.family.condition(y).noisy_score(self.schedule, x, t)

    def epsilon(self, x, t, y: Condition = None, view=None) -> np.ndarray:
        return eps_from_score(self.score(x, t, y), self.schedule, t)

    def embed(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def sample(self, n: int, y: Condition, rng: np.random.Generator) -> np.ndarray:
        return self.family.condition(y).sample(n, rng)


@dataclass(frozen=True, eq=False)
class ProjectedScore:
    """Analytic prior living on a low-dimensional linear projection of a larger space.

    ``projection`` has orthonormal rows (k, D). The prior's score is evaluated on
    ``projection @ x`` and lifted back with the transpose. By default the
    orthogonal complement is left unconstrained (zero noise prediction there);
    ``complement_var`` instead puts an N(0, complement_var) prior on it.
    """

    inner: AnalyticScore
    projection: np.ndarray
    complement_var: Optional[float] = None

    def __post_init__(self):
        p = np.asarray(self.projection, dtype=float)
        if p.shape[0] != self.inner.dimension:
            raise ConfigError(f"projection has {p.shape[0]} rows, prior dimension is {self.inner.dimension}")
        if not np.allclose(p @ p.T, np.eye(p.shape[0]), atol=1e-10):
            raise ConfigError("projection rows must be orthonormal")
        if self.complement_var is not None and not self.complement_var > 0:
            raise ConfigError("complement_var must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "projection", p)

    @property
    def schedule(self) -> NoiseSchedule:
        return self.inner.schedule

    @property
    def dimension(self) -> int:
        return self.projection.shape[1]

    def embed(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.projection.T

    def epsilon(self, x, t, y: Condition = None, view=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.inner.epsilon(self.embed(x), t, y) @ self.projection
        if self.complement_var is None:
            return out
        a = _col(np.asarray(self.schedule.alpha_bar(t), dtype=float), x)
        rest = x - self.embed(x) @ self.projection
        # exact noise prediction for N(0, v I) data on the complement
        return out + np.sqrt(1.0 - a) * rest / (a * self.complement_var + 1.0 - a)

    def sample(self, n: int, y: Condition, rng: np.random.Generator) -> np.ndarray:
        return self.inner.sample(n, y, rng)


def random_orthonormal(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, k)))
    return (q * np.sign(np.diag(r))).T
