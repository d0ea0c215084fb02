"""Euler-Maruyama simulation of the VP forward and reverse SDEs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from tracelab import _rng
from tracelab.errors import DomainError, NumericError
from tracelab.schedule import NoiseSchedule
from tracelab.score import Condition, ScoreModel, score_from_eps

# reverse integration stops here; scores of narrow components blow up as t -> 0
REVERSE_T_MIN = 0.02

_FORWARD_TAG = 1
_REVERSE_TAG = 2


@dataclass(frozen=True)
class SdeSpec:
    schedule: NoiseSchedule
    n_steps: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")


@dataclass(frozen=True)
class PathEnsemble:
    samples: np.ndarray
    time: float
    provenance: Literal["forward", "reverse"]

    def to_csv(self, path, header_lines: tuple[str, ...] = ()) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh, lineterminator="\n")
            d = self.samples.shape[1]
            writer.writerow([f"x{i}" for i in range(d)] + ["time", "provenance"])
            for row in self.samples:
                writer.writerow([repr(float(v)) for v in row] + [repr(self.time), self.provenance])

    @classmethod
    def from_csv(cls, path) -> PathEnsemble:
        rows = [r for r in Path(path).read_text().splitlines() if r and not r.startswith("#")]
        reader = list(csv.reader(rows[1:]))
        samples = np.array([[float(v) for v in r[:-2]] for r in reader])
        return cls(samples, float(reader[0][-2]), reader[0][-1])


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite state after step {step}")


def forward_drift(sched: NoiseSchedule, x: np.ndarray, t: float) -> np.ndarray:
    return -0.5 * sched.beta(t) * x


def reverse_drift(sched: NoiseSchedule, x: np.ndarray, t: float, score: np.ndarray) -> np.ndarray:
    """Reverse-time drift f - g^2 * score with g^2 = beta."""
    return forward_drift(sched, x, t) - sched.beta(t) * score


def simulate_forward(spec: SdeSpec, x0_samples, t_end: float) -> PathEnsemble:
    """Integrate dX = -beta/2 X dt + sqrt(beta) dW from t=0 to ``t_end``."""
    x = np.array(x0_samples, dtype=float, copy=True)
    if x.ndim == 1:
        x = x[:, None]
    if not 0.0 <= t_end <= 1.0:
        raise DomainError(f"t_end must lie in [0, 1], got {t_end}")
    if t_end == 0.0:
        return PathEnsemble(x, 0.0, "forward")
    sched = spec.schedule
    dt = t_end / spec.n_steps
    streams = _rng.block_streams(spec.rng_seed, x.shape[0], _FORWARD_TAG)
    for k in range(spec.n_steps):
        t = k * dt
        b = sched.beta(t)
        for sl, rng in streams:
            z = rng.standard_normal(x[sl].shape)
            x[sl] += -0.5 * b * x[sl] * dt + np.sqrt(b * dt) * z
        _check_finite(x, k)
    return PathEnsemble(x, float(t_end), "forward")


def simulate_reverse(
    spec: SdeSpec,
    x1_samples,
    score: ScoreModel,
    y: Condition = None,
    t_min: float = REVERSE_T_MIN,
) -> PathEnsemble:
    """Integrate the reverse-time SDE from t=1 down to ``t_min``.

    ``score`` supplies noise predictions; they are converted to scores with the
    SdeSpec schedule before forming the drift.
    """
    x = np.array(x1_samples, dtype=float, copy=True)
    if x.ndim == 1:
        x = x[:, None]
    sched = spec.schedule
    dt = (1.0 - t_min) / spec.n_steps
    streams = _rng.block_streams(spec.rng_seed, x.shape[0], _REVERSE_TAG)
    for k in range(spec.n_steps):
        t = 1.0 - k * dt
        b = sched.beta(t)
        for sl, rng in streams:
            s = score_from_eps(score.epsilon(x[sl], t, y), sched, t)
            z = rng.standard_normal(x[sl].shape)
            x[sl] += -reverse_drift(sched, x[sl], t, s) * dt + np.sqrt(b * dt) * z
        _check_finite(x, k)
    return PathEnsemble(x, float(t_min), "reverse")
