"""Differentiable image formers with hand-derived vector-Jacobian products.

Canvas coordinates are in pixel units with the origin at the canvas centre;
pixel (row r, column c) has its centre at (c + 0.5 - W/2, r + 0.5 - H/2).
A view maps scene coordinates to canvas coordinates, p = A q + b; rendering
pulls each pixel centre back into the scene with the inverse map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import expit

from tracelab.errors import DomainError


@dataclass(frozen=True)
class ViewTransform:
    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.linear, dtype=float).reshape(2, 2)
        b = np.asarray(self.translation, dtype=float).reshape(2)
        if abs(np.linalg.det(a)) <= 1e-6:
            raise DomainError("view linear part is (near) singular")
        object.__setattr__(self, "linear", a)
        object.__setattr__(self, "translation", b)

    @classmethod
    def identity(cls) -> ViewTransform:
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, scale: float, rotation: float, translation=(0.0, 0.0)) -> ViewTransform:
        c, s = np.cos(rotation), np.sin(rotation)
        return cls(scale * np.array([[c, -s], [s, c]]), np.asarray(translation, dtype=float))

    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.linear.ravel(), self.translation])

    def inverse(self) -> ViewTransform:
        inv = np.linalg.inv(self.linear)
        return ViewTransform(inv, -inv @ self.translation)

    def to_scene(self, p: np.ndarray) -> np.ndarray:
        """Canvas points (..., 2) to scene coordinates."""
        if np.array_equal(self.linear, np.eye(2)) and not self.translation.any():
            return p
        return (p - self.translation) @ np.linalg.inv(self.linear).T


@dataclass(frozen=True)
class ViewRanges:
    scale: tuple[float, float] = (1 / 4.0, 1 / 1.5)
    rotation: tuple[float, float] = (0.0, 2 * np.pi)
    translation: tuple[float, float] = (-1.0, 1.0)


def sample_view(rng: np.random.Generator, ranges: ViewRanges = ViewRanges()) -> ViewTransform:
    """Uniform scale, rotation and per-axis translation from ``ranges``."""
    s = rng.uniform(*ranges.scale)
    r = rng.uniform(*ranges.rotation)
    b = rng.uniform(*ranges.translation, size=2)
    return ViewTransform.from_params(s, r, b)


def pixel_centers(h: int, w: int) -> np.ndarray:
    """(H*W, 2) canvas coordinates of pixel centres, row-major."""
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([cols.ravel() + 0.5 - w / 2, rows.ravel() + 0.5 - h / 2], axis=1)


class Generator(Protocol):
    """Differentiable image former g(theta, view) -> (H, W, C) canvas."""

    canvas_shape: tuple[int, int, int]
    param_shape: tuple[int, ...]

    def render(self, theta: np.ndarray, view: ViewTransform) -> np.ndarray: ...

    def vjp(self, theta: np.ndarray, view: ViewTransform, grad_canvas: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class DirectField:
    """theta is the scene field itself; views resample it bilinearly with edge clamping."""

    height: int
    width: int
    channels: int = 1

    @property
    def canvas_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def param_shape(self) -> tuple[int, int, int]:
        return self.canvas_shape

    def _taps(self, view: ViewTransform):
        q = view.to_scene(pixel_centers(self.height, self.width))
        # continuous field indices
        u = q[:, 0] + self.width / 2 - 0.5
        v = q[:, 1] + self.height / 2 - 0.5
        u0 = np.floor(u)
        v0 = np.floor(v)
        fu = u - u0
        fv = v - v0
        c0 = np.clip(u0, 0, self.width - 1).astype(int)
        c1 = np.clip(u0 + 1, 0, self.width - 1).astype(int)
        r0 = np.clip(v0, 0, self.height - 1).astype(int)
        r1 = np.clip(v0 + 1, 0, self.height - 1).astype(int)
        idx = [r0 * self.width + c0, r0 * self.width + c1, r1 * self.width + c0, r1 * self.width + c1]
        wts = [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]
        return idx, wts

    def render(self, theta, view: ViewTransform) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(self.canvas_shape)
        if np.array_equal(view.linear, np.eye(2)) and not view.translation.any():
            return theta.copy()
        flat = theta.reshape(-1, self.channels)
        idx, wts = self._taps(view)
        out = sum(w[:, None] * flat[i] for i, w in zip(idx, wts))
        return out.reshape(self.canvas_shape)

    def vjp(self, theta, view: ViewTransform, grad_canvas) -> np.ndarray:
        g = np.asarray(grad_canvas, dtype=float).reshape(-1, self.channels)
        if np.array_equal(view.linear, np.eye(2)) and not view.translation.any():
            return g.reshape(self.param_shape).copy()
        out = np.zeros((self.height * self.width, self.channels))
        idx, wts = self._taps(view)
        for i, w in zip(idx, wts):
            np.add.at(out, i, w[:, None] * g)
        return out.reshape(self.param_shape)


# per-splat parameter layout
CENTER = slice(0, 2)
LOG_SCALE = slice(2, 4)
ANGLE = 4
LOGIT_OPACITY = 5
INTENSITY = 6


@dataclass(frozen=True)
class Splat2D:
    """Additively composited 2D Gaussian splats.

    theta is (n_splats, 6 + channels): centre (2), log scales (2), rotation
    angle, opacity logit, intensity (channels). Each pixel is
    ``background + sum_k sigmoid(o_k) * I_k * exp(-d^T Sigma_k^-1 d / 2)``
    with d the pixel centre pulled back into the scene minus the splat centre
    and Sigma_k = R diag(exp(2 s)) R^T.
    """

    height: int = 32
    width: int = 32
    channels: int = 1
    n_splats: int = 10
    background: float = 0.0

    @property
    def canvas_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def param_shape(self) -> tuple[int, int]:
        return (self.n_splats, 6 + self.channels)

    def _geometry(self, theta, view):
        theta = np.asarray(theta, dtype=float).reshape(self.param_shape)
        q = view.to_scene(pixel_centers(self.height, self.width))
        d = q[None, :, :] - theta[:, None, CENTER]
        ca = np.cos(theta[:, ANGLE])[:, None]
        sa = np.sin(theta[:, ANGLE])[:, None]
        u1 = ca * d[..., 0] + sa * d[..., 1]
        u2 = -sa * d[..., 0] + ca * d[..., 1]
        e1 = np.exp(-2.0 * theta[:, 2])[:, None]
        e2 = np.exp(-2.0 * theta[:, 3])[:, None]
        g = np.exp(-0.5 * (u1 * u1 * e1 + u2 * u2 * e2))
        alpha = expit(theta[:, LOGIT_OPACITY])
        return theta, (ca, sa, u1, u2, e1, e2, g, alpha)

    def render(self, theta, view: ViewTransform) -> np.ndarray:
        theta, (*_, g, alpha) = self._geometry(theta, view)
        amp = alpha[:, None] * theta[:, INTENSITY:]
        # fixed summation order over splats keeps the result reproducible
        out = self.background + np.einsum("kp,kc->pc", g, amp)
        return out.reshape(self.canvas_shape)

    def vjp(self, theta, view: ViewTransform, grad_canvas) -> np.ndarray:
        theta, (ca, sa, u1, u2, e1, e2, g, alpha) = self._geometry(theta, view)
        gc = np.asarray(grad_canvas, dtype=float).reshape(-1, self.channels)
        inten = theta[:, INTENSITY:]
        grad = np.zeros(self.param_shape)
        grad[:, INTENSITY:] = alpha[:, None] * (g @ gc)
        h = inten @ gc.T  # (K, P): intensity-weighted upstream gradient
        gh = g * h
        grad[:, LOGIT_OPACITY] = alpha * (1.0 - alpha) * gh.sum(axis=1)
        # dG = G * (-m/2)'; collect -1/2 * dm for each raw parameter
        coef = alpha[:, None] * gh * -0.5
        grad[:, 2] = np.sum(coef * (-2.0 * u1 * u1 * e1), axis=1)
        grad[:, 3] = np.sum(coef * (-2.0 * u2 * u2 * e2), axis=1)
        grad[:, ANGLE] = np.sum(coef * (2.0 * u1 * u2 * (e1 - e2)), axis=1)
        dm_dd1 = 2.0 * (ca * u1 * e1 - sa * u2 * e2)
        dm_dd2 = 2.0 * (sa * u1 * e1 + ca * u2 * e2)
        grad[:, 0] = -np.sum(coef * dm_dd1, axis=1)
        grad[:, 1] = -np.sum(coef * dm_dd2, axis=1)
        return grad


def render(gen: Generator, theta, view: ViewTransform) -> np.ndarray:
    return gen.render(theta, view)


def render_vjp(gen: Generator, theta, view: ViewTransform, grad_canvas) -> np.ndarray:
    if np.shape(grad_canvas) != tuple(gen.canvas_shape) and np.size(grad_canvas) != int(np.prod(gen.canvas_shape)):
        raise DomainError(f"gradient canvas of shape {np.shape(grad_canvas)} does not match {gen.canvas_shape}")
    return gen.vjp(theta, view, grad_canvas)


def random_splats(gen: Splat2D, rng: np.random.Generator, spread: float | None = None) -> np.ndarray:
    """Random but well-conditioned splat scene inside the canvas."""
    spread = spread if spread is not None else 0.3 * min(gen.height, gen.width)
    theta = np.zeros(gen.param_shape)
    theta[:, CENTER] = rng.uniform(-spread, spread, size=(gen.n_splats, 2))
    theta[:, LOG_SCALE] = np.log(rng.uniform(1.0, 3.0, size=(gen.n_splats, 2)))
    theta[:, ANGLE] = rng.uniform(0, np.pi, size=gen.n_splats)
    theta[:, LOGIT_OPACITY] = rng.normal(0.0, 1.0, size=gen.n_splats)
    theta[:, INTENSITY:] = rng.uniform(0.2, 1.0, size=(gen.n_splats, gen.channels))
    return theta
