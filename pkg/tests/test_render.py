import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracelab import _rng
from tracelab.errors import DomainError
from tracelab.render import (
    INTENSITY,
    DirectField,
    Splat2D,
    ViewRanges,
    ViewTransform,
    random_splats,
    render,
    render_vjp,
    sample_view,
)

IDENT = ViewTransform.identity()


def _view(rng, lo=0.7, hi=1.3):
    return ViewTransform.from_params(rng.uniform(lo, hi), rng.uniform(0, 2 * np.pi), rng.uniform(-1, 1, 2))


def test_zero_splats_give_background():
    gen = Splat2D(8, 8, 1, n_splats=0, background=0.25)
    assert np.all(render(gen, np.zeros(gen.param_shape), IDENT) == 0.25)


def test_isotropic_splat_profile():
    gen = Splat2D(16, 16, 1, n_splats=1)
    theta = np.zeros(gen.param_shape)
    theta[0, :2] = (0.5, 0.5)  # a pixel centre
    theta[0, 2:4] = np.log(2.0)
    theta[0, 5] = 60.0
    theta[0, INTENSITY] = 1.0
    img = render(gen, theta, IDENT)[..., 0]
    r, c = 8, 8  # pixel whose centre is (0.5, 0.5)
    centre = img[r, c]
    assert centre == img.max()
    for dr, dc in [(0, 1), (3, 0), (2, -4), (-5, 5)]:
        d2 = dr * dr + dc * dc
        assert abs(img[r + dr, c + dc] - np.exp(-d2 / 8.0) * centre) <= 1e-12


def test_direct_identity_is_bitwise():
    gen = DirectField(5, 4, 2)
    theta = _rng.stream(0, 1).standard_normal(gen.param_shape)
    assert np.array_equal(render(gen, theta, IDENT), theta)
    g = _rng.stream(0, 2).standard_normal(gen.canvas_shape)
    assert np.array_equal(render_vjp(gen, theta, IDENT, g), g)


@pytest.mark.parametrize("k", range(20))
def test_splat_vjp_finite_differences(k):
    rng = _rng.stream(k, 3)
    gen = Splat2D(10, 10, 1 + k % 3 // 2 * 2, n_splats=10)
    theta = random_splats(gen, rng, spread=3.0)
    w = rng.standard_normal(gen.canvas_shape)
    for _ in range(5):
        view = _view(rng)
        an = render_vjp(gen, theta, view, w)
        fd = np.zeros_like(theta)
        h = 1e-4
        for idx in np.ndindex(theta.shape):
            e = np.zeros_like(theta)
            e[idx] = h
            fd[idx] = np.sum(w * (gen.render(theta + e, view) - gen.render(theta - e, view))) / (2 * h)
        assert np.max(np.abs(fd - an)) / np.max(np.abs(an)) < 1e-4


def test_zero_upstream_gives_zero_gradient():
    gen = Splat2D(6, 6, 1, 3)
    theta = random_splats(gen, _rng.stream(0, 4))
    assert np.all(render_vjp(gen, theta, IDENT, np.zeros(gen.canvas_shape)) == 0.0)


@given(st.integers(0, 10**6))
def test_linear_in_intensity(seed):
    rng = _rng.stream(seed, 5)
    gen = Splat2D(6, 6, 1, 4, background=0.3)
    theta = random_splats(gen, rng)
    view = _view(rng)
    doubled = theta.copy()
    doubled[:, INTENSITY:] *= 2
    base = gen.render(theta, view)
    np.testing.assert_allclose(gen.render(doubled, view), 2 * (base - 0.3) + 0.3, atol=1e-12)


def test_direct_field_adjoint():
    gen = DirectField(7, 6, 1)
    for k in range(10):
        rng = _rng.stream(k, 6)
        view = _view(rng, 0.5, 1.5)
        v = rng.standard_normal(gen.param_shape)
        w = rng.standard_normal(gen.canvas_shape)
        assert np.sum(w * gen.render(v, view)) == pytest.approx(np.sum(v * gen.vjp(v, view, w)), abs=1e-12)


def test_direct_field_view_equivariance():
    gen = DirectField(32, 32, 1)
    yy, xx = np.mgrid[0:32, 0:32] - 15.5
    theta = (np.cos(2 * np.pi * xx / 64) * np.sin(2 * np.pi * yy / 80 + 0.3))[..., None]
    rng = _rng.stream(0, 7)
    interior = (xx**2 + yy**2) < 8**2
    for _ in range(5):
        view = _view(rng, 0.8, 1.25)
        back = gen.render(gen.render(theta, view), view.inverse())
        assert np.max(np.abs(back - theta)[interior]) < 1e-2


def test_sample_view_bounds_and_determinism():
    rng = _rng.stream(0, 8)
    scales = [np.sqrt(abs(np.linalg.det(sample_view(rng).linear))) for _ in range(10_000)]
    assert min(scales) >= 1 / 4.0 - 1e-12 and max(scales) <= 1 / 1.5 + 1e-12
    a = sample_view(_rng.stream(1, 9))
    b = sample_view(_rng.stream(1, 9))
    assert np.array_equal(a.coefficients(), b.coefficients())


def test_identity_ranges_give_identity():
    v = sample_view(_rng.stream(0, 10), ViewRanges((1.0, 1.0), (0.0, 0.0), (0.0, 0.0)))
    assert np.array_equal(v.coefficients(), IDENT.coefficients())


def test_degenerate_view_rejected():
    with pytest.raises(DomainError):
        ViewTransform(np.zeros((2, 2)), np.zeros(2))


def test_vjp_shape_check():
    with pytest.raises(DomainError):
        render_vjp(DirectField(2, 2), np.zeros((2, 2, 1)), IDENT, np.zeros(5))
