import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tracelab import _rng
from tracelab.bridge import (
    BridgeEndpoints,
    degenerate_factors,
    duality_residual,
    posterior_params,
    posterior_sample,
    sb_backward_drift,
    simulate_bridge_sde,
)
from tracelab.errors import DomainError
from tracelab.schedule import NoiseSchedule
from tracelab.score import default_family
from tracelab.sde import reverse_drift

SCHED = NoiseSchedule()
coords = hnp.arrays(float, (3, 2), elements=st.floats(-1e3, 1e3, allow_nan=False))


def test_posterior_example():
    ends = BridgeEndpoints(np.array([0.0, 0.0]), np.array([4.0, 0.0]))
    p = posterior_params(ends, SCHED, 0.5)
    np.testing.assert_allclose(p.mu, [1.00995, 0.0], atol=5e-6)
    assert p.big_sigma == pytest.approx(1.896813, abs=5e-7)
    assert p.sigma_t == pytest.approx(np.sqrt(2.5375))


@given(coords, coords, st.sampled_from([0.0, 1.0]))
def test_endpoints_pinned_bitwise(a, b, t):
    x, _ = posterior_sample(BridgeEndpoints(a, b), SCHED, t, _rng.stream(0, 1))
    assert np.array_equal(x, a if t == 0.0 else b)


@given(coords, st.floats(0.01, 0.99))
def test_equal_endpoints_mean_is_endpoint(a, t):
    p = posterior_params(BridgeEndpoints(a, a), SCHED, t)
    np.testing.assert_allclose(p.mu, a, rtol=1e-12, atol=1e-9)


def test_batched_times_per_row():
    a, b = np.zeros((3, 2)), np.ones((3, 2))
    t = np.array([0.1, 0.5, 0.9])
    mu = posterior_params(BridgeEndpoints(a, b), SCHED, t).mu
    for i in range(3):
        np.testing.assert_allclose(mu[i], posterior_params(BridgeEndpoints(a[i], b[i]), SCHED, t[i]).mu)


def test_given_noise_is_used():
    ends = BridgeEndpoints(np.zeros(2), np.ones(2))
    z = np.array([1.0, -1.0])
    x, z_out = posterior_sample(ends, SCHED, 0.5, None, z=z)
    p = posterior_params(ends, SCHED, 0.5)
    np.testing.assert_allclose(x, p.mu + np.sqrt(p.big_sigma) * z)
    assert z_out is z


def test_endpoint_validation():
    with pytest.raises(DomainError):
        BridgeEndpoints(np.zeros(2), np.zeros(3))
    with pytest.raises(DomainError):
        BridgeEndpoints(np.array([np.nan]), np.zeros(1))


def test_posterior_sample_moments():
    ends = BridgeEndpoints(np.array([0.0, 1.0]), np.array([4.0, -2.0]))
    n = 100_000
    x, _ = posterior_sample(BridgeEndpoints(np.tile(ends.x_target, (n, 1)), np.tile(ends.x_source, (n, 1))),
                            SCHED, 0.5, _rng.stream(0, 2))
    p = posterior_params(ends, SCHED, 0.5)
    assert np.all(np.abs(x.mean(axis=0) - p.mu) <= 4 * np.sqrt(p.big_sigma / n))
    np.testing.assert_allclose(x.var(axis=0), p.big_sigma, rtol=0.05)


def test_sde_matches_closed_form_moments():
    ends = BridgeEndpoints(np.array([-3.0, 2.0]), np.array([5.0, 0.0]))
    n = 4000
    path = simulate_bridge_sde(ends, SCHED, n_steps=400, n_paths=n, seed=1)
    for t in (0.25, 0.5, 0.75):
        x = path.at(t)
        p = posterior_params(ends, SCHED, t)
        se = x.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(x.mean(axis=0) - p.mu) <= 4 * se)
        np.testing.assert_allclose(x.var(axis=0, ddof=1), p.big_sigma, rtol=0.08)


def test_sde_is_deterministic_and_block_stable():
    ends = BridgeEndpoints(np.zeros(1), np.ones(1))
    a = simulate_bridge_sde(ends, SCHED, 100, 50, seed=3).at(0.5)
    b = simulate_bridge_sde(ends, SCHED, 100, 50, seed=3).at(0.5)
    assert np.array_equal(a, b)
    with pytest.raises(DomainError):
        simulate_bridge_sde(ends, SCHED, 10, 5)


def test_degenerate_factors_collapse():
    p = default_family().unconditional
    fac = degenerate_factors(p, SCHED)
    x = _rng.stream(0, 3).uniform(-5, 5, (200, 2))
    for t in (0.1, 0.5, 0.9):
        assert np.max(np.abs(duality_residual(fac, x, t))) <= 1e-12
        sgm = reverse_drift(SCHED, x, t, p.noisy_score(SCHED, x, t))
        assert np.max(np.abs(sb_backward_drift(fac, SCHED, x, t) - sgm)) <= 1e-12
