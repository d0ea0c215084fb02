import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tracelab import _rng
from tracelab.errors import ConfigError, DomainError
from tracelab.schedule import NoiseSchedule
from tracelab.score import (
    TOY_OFFSET,
    AnalyticScore,
    GmmDistribution,
    GmmFamily,
    ProjectedScore,
    bimodal_gmm,
    cfg_combine,
    default_family,
    eps_from_score,
    random_orthonormal,
    ring_gmm,
    score_from_eps,
)

SCHED = NoiseSchedule()
finite = st.floats(-50, 50, allow_nan=False)


def test_gaussian_noisy_score_closed_form():
    mu, var = np.array([1.0, -2.0]), np.array([0.5, 2.0])
    p = GmmDistribution(np.ones(1), mu[None], var[None])
    x = _rng.stream(0, 1).standard_normal((64, 2))
    for t in (0.05, 0.5, 1.0):
        a = SCHED.alpha_bar(t)
        want = -(x - np.sqrt(a) * mu) / (a * var + 1 - a)
        np.testing.assert_allclose(p.noisy_score(SCHED, x, t), want, atol=1e-12)


def test_clean_score_matches_log_prob_gradient():
    p = default_family().unconditional
    x = _rng.stream(0, 2).standard_normal((20, 2)) * 3
    h = 1e-6
    fd = np.stack([(p.log_prob(x + h * e) - p.log_prob(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    np.testing.assert_allclose(p.score(x), fd, atol=1e-6)


def test_noisy_score_far_from_modes_is_finite():
    p = default_family().condition(1)
    x = np.array([[300.0, -400.0]])
    assert np.all(np.isfinite(p.noisy_score(SCHED, x, 0.02)))


@given(hnp.arrays(float, (5, 3), elements=finite), st.floats(0.01, 1.0))
def test_eps_score_roundtrip(s, t):
    back = score_from_eps(eps_from_score(s, SCHED, t), SCHED, t)
    np.testing.assert_allclose(back, s, rtol=1e-12, atol=1e-12)


def test_eps_at_zero_time_rejected():
    with pytest.raises(DomainError):
        eps_from_score(np.ones((1, 2)), SCHED, 0.0)


@given(hnp.arrays(float, (4, 2), elements=finite), hnp.arrays(float, (4, 2), elements=finite))
def test_cfg_special_weights(ec, eu):
    assert np.array_equal(cfg_combine(ec, eu, 1.0), eu + (ec - eu))
    assert np.array_equal(cfg_combine(ec, eu, 0.0), eu)


@given(st.floats(0, 100), st.floats(0, 100))
def test_cfg_affine_in_weight(w1, w2):
    ec, eu = _rng.stream(0, 3).standard_normal((2, 6, 2))
    lhs = cfg_combine(ec, eu, w1) + cfg_combine(ec, eu, w2)
    np.testing.assert_allclose(lhs, 2 * cfg_combine(ec, eu, (w1 + w2) / 2), atol=1e-9)


def test_cfg_shape_mismatch():
    with pytest.raises(DomainError):
        cfg_combine(np.zeros((2, 2)), np.zeros((2, 3)), 2.0)


@pytest.mark.parametrize("kw", [
    dict(weights=[0.5, 0.6], means=[[0.0], [1.0]], variances=1.0),
    dict(weights=[1.5, -0.5], means=[[0.0], [1.0]], variances=1.0),
    dict(weights=[1.0], means=[[0.0]], variances=0.0),
])
def test_gmm_validation(kw):
    with pytest.raises(ConfigError):
        GmmDistribution(**kw)


def test_family_dimension_mismatch():
    with pytest.raises(ConfigError):
        GmmFamily((ring_gmm(), GmmDistribution([1.0], [[0.0]], 1.0)))


def test_default_family_layout():
    fam = default_family()
    assert len(fam) == 2 and fam.dimension == 2
    np.testing.assert_allclose(np.linalg.norm(fam.condition(0).means, axis=1), 3.0)
    np.testing.assert_allclose(fam.condition(1).means, [np.negative(TOY_OFFSET), TOY_OFFSET])
    assert fam.unconditional.weights.sum() == pytest.approx(1.0)
    with pytest.raises(DomainError):
        fam.condition(2)


def test_sample_moments():
    p = bimodal_gmm((2.0, -1.0), 0.25)
    x = p.sample(40000, _rng.stream(0, 4))
    np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=0.03)
    np.testing.assert_allclose(x.var(axis=0), [4.25, 1.25], rtol=0.03)


def test_diffused_matches_noisy_score():
    p = default_family().condition(0)
    x = _rng.stream(0, 5).standard_normal((30, 2)) * 2
    np.testing.assert_allclose(p.diffused(SCHED, 0.3).score(x), p.noisy_score(SCHED, x, 0.3), atol=1e-12)


def test_projected_score_lifts_through_projection():
    inner = AnalyticScore(default_family(), SCHED)
    proj = random_orthonormal(2, 6, _rng.stream(0, 6))
    ps = ProjectedScore(inner, proj)
    x = _rng.stream(0, 7).standard_normal((5, 6))
    out = ps.epsilon(x, 0.4, 1)
    np.testing.assert_allclose(out, inner.epsilon(x @ proj.T, 0.4, 1) @ proj, atol=1e-12)
    # nothing leaks into the orthogonal complement
    np.testing.assert_allclose(out - (out @ proj.T) @ proj, 0.0, atol=1e-12)
    with pytest.raises(ConfigError):
        ProjectedScore(inner, 2 * proj)


def test_complement_prior_matches_full_gaussian():
    mu, s2, v = np.array([0.7, -1.2]), 0.4, 0.25
    inner = AnalyticScore(GmmFamily((GmmDistribution([1.0], [mu], s2),)), SCHED)
    proj = random_orthonormal(2, 5, _rng.stream(0, 8))
    ps = ProjectedScore(inner, proj, complement_var=v)
    # the same prior written as one Gaussian on R^5
    pp = proj.T @ proj
    mean, cov = proj.T @ mu, s2 * pp + v * (np.eye(5) - pp)
    x = _rng.stream(0, 9).standard_normal((7, 5))
    for t in (0.1, 0.6):
        a = SCHED.alpha_bar(t)
        score = -(x - np.sqrt(a) * mean) @ np.linalg.inv(a * cov + (1 - a) * np.eye(5))
        np.testing.assert_allclose(ps.epsilon(x, t, 0), -np.sqrt(1 - a) * score, atol=1e-12)
    with pytest.raises(ConfigError):
        ProjectedScore(inner, proj, complement_var=0.0)
