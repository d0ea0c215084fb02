import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracelab.errors import ConfigError, DomainError
from tracelab.schedule import NoiseSchedule, TimeSampler, sample_t_prime, two_stage_sampler

LIN = NoiseSchedule()
unit = st.floats(0.0, 1.0, allow_nan=False)
inner = st.floats(1e-3, 1.0 - 1e-3, allow_nan=False)


def _trapezoid(f, a, b, n=10**6):
    s = np.linspace(a, b, n + 1)
    return np.trapezoid(f(s), s)


def test_frozen_values_at_half():
    s2, sb2 = LIN.accumulated_variances(0.5)
    assert s2 == pytest.approx(2.5375, abs=1e-12)
    assert sb2 == pytest.approx(7.5125, abs=1e-12)
    g, big = LIN.bridge_coefficients(0.5)
    assert g == pytest.approx(0.747512, abs=5e-7)
    assert big == pytest.approx(1.896813, abs=5e-7)
    assert LIN.alpha_bar(0.5) == pytest.approx(0.0790638, rel=1e-6)
    assert LIN.alpha_bar(1.0) == pytest.approx(4.3186e-5, rel=1e-4)


def test_integrals_match_trapezoid_oracle():
    beta = lambda s: 0.1 + 19.9 * s
    s2, sb2 = LIN.accumulated_variances(0.5)
    assert s2 == pytest.approx(_trapezoid(beta, 0.0, 0.5), abs=1e-9)
    assert sb2 == pytest.approx(_trapezoid(beta, 0.5, 1.0), abs=1e-9)


def test_cosine_against_trapezoid():
    sched = NoiseSchedule("cosine")
    beta = lambda s: 0.1 + 19.9 * 0.5 * (1 - np.cos(np.pi * s))
    for t in (0.2, 0.5, 0.9):
        assert sched.sigma2(t) == pytest.approx(_trapezoid(beta, 0.0, t), abs=1e-8)


@given(unit)
def test_variances_partition_total(t):
    s2, sb2 = LIN.accumulated_variances(t)
    assert abs(s2 + sb2 - LIN.total) <= 1e-10


@given(unit)
def test_bridge_coefficients_bounded(t):
    g, big = LIN.bridge_coefficients(t)
    s2, sb2 = LIN.accumulated_variances(t)
    assert 0.0 <= g <= 1.0
    assert 0.0 <= big <= min(s2, sb2) + 1e-12


@given(unit, unit)
def test_gamma_decreasing(a, b):
    lo, hi = sorted((a, b))
    assert LIN.bridge_coefficients(lo)[0] >= LIN.bridge_coefficients(hi)[0]


def test_endpoints_exact():
    assert LIN.bridge_coefficients(0.0) == (1.0, 0.0)
    assert LIN.bridge_coefficients(1.0) == (0.0, 0.0)
    assert LIN.sigma2(0.0) == 0.0


@given(st.floats(0.0, 10.05))
def test_inverse_sigma2_roundtrip(level):
    assert LIN.sigma2(LIN.inverse_sigma2(level)) == pytest.approx(level, abs=1e-9)


def test_vectorised_matches_scalar():
    t = np.linspace(0, 1, 11)
    s2 = LIN.sigma2(t)
    assert s2.shape == (11,)
    assert all(s2[i] == LIN.sigma2(float(t[i])) for i in range(11))


@pytest.mark.parametrize("t", [-0.1, 1.1, np.nan])
def test_out_of_range(t):
    with pytest.raises(DomainError):
        LIN.sigma2(t)


@pytest.mark.parametrize("kw", [dict(kind="quadratic"), dict(beta_min=0.0), dict(beta_min=2.0, beta_max=1.0)])
def test_bad_schedule(kw):
    with pytest.raises(ConfigError):
        NoiseSchedule(**kw)


def test_sampler_is_pure_function_of_iteration():
    s = TimeSampler(mode="uniform", rng_seed=3)
    assert np.array_equal(s.sample(5, size=10), s.sample(5, size=10))
    assert not np.array_equal(s.sample(5, size=10), s.sample(6, size=10))


def test_two_stage_windows():
    s = two_stage_sampler(total_iterations=100, stage_boundary=40)
    assert s.window(39) == (0.02, 0.7)
    assert s.window(40) == (0.02, 0.5)
    late = sample_t_prime(s, 80, size=1000)
    assert late.max() <= 0.5 and late.min() >= 0.02


def test_annealed_window_shrinks():
    s = TimeSampler(mode="annealed", lo=0.02, hi=0.5, total_iterations=100)
    tops = [s.window(i)[1] for i in range(100)]
    assert tops[0] == 0.5
    assert tops[-1] == pytest.approx(0.03)
    assert all(a >= b for a, b in zip(tops, tops[1:]))


def test_t_prime_needs_two_stage():
    with pytest.raises(ConfigError):
        sample_t_prime(TimeSampler(), 0)
