import numpy as np
import pytest

from tracelab import _rng
from tracelab.errors import DomainError, NumericError
from tracelab.metrics import sliced_w1
from tracelab.schedule import NoiseSchedule
from tracelab.score import AnalyticScore, GmmDistribution, GmmFamily
from tracelab.sde import PathEnsemble, SdeSpec, forward_drift, reverse_drift, simulate_forward, simulate_reverse

SCHED = NoiseSchedule()


def test_forward_marginal_moments():
    n, mu, s2 = 20000, 2.0, 0.25
    x0 = mu + np.sqrt(s2) * _rng.stream(0, 1).standard_normal((n, 1))
    out = simulate_forward(SdeSpec(SCHED, 500, 0), x0, 0.5).samples[:, 0]
    a = SCHED.alpha_bar(0.5)
    m, v = np.sqrt(a) * mu, a * s2 + 1 - a
    assert abs(out.mean() - m) <= 4 * np.sqrt(v / n)
    assert out.var() == pytest.approx(v, rel=0.05)


def test_forward_zero_time_is_identity():
    x = np.arange(6.0).reshape(3, 2)
    out = simulate_forward(SdeSpec(SCHED), x, 0.0)
    assert np.array_equal(out.samples, x) and out.samples is not x


def test_forward_deterministic():
    x = np.zeros((100, 2))
    a = simulate_forward(SdeSpec(SCHED, 50, 7), x, 1.0).samples
    b = simulate_forward(SdeSpec(SCHED, 50, 7), x, 1.0).samples
    assert np.array_equal(a, b)


def test_reverse_recovers_gaussian():
    p = GmmDistribution(np.ones(1), [[1.5, -0.5]], 0.3)
    score = AnalyticScore(GmmFamily((p,)), SCHED)
    x1 = _rng.stream(0, 2).standard_normal((10000, 2))
    out = simulate_reverse(SdeSpec(SCHED, 500, 0), x1, score, y=0).samples
    ref = p.sample(10000, _rng.stream(0, 3))
    assert sliced_w1(out, ref) < 0.05


def test_drift_relation():
    x = _rng.stream(0, 4).standard_normal((4, 2))
    s = _rng.stream(0, 5).standard_normal((4, 2))
    np.testing.assert_allclose(reverse_drift(SCHED, x, 0.3, s), forward_drift(SCHED, x, 0.3) - SCHED.beta(0.3) * s)


def test_divergence_raises():
    class Bad:
        dimension = 1

        def epsilon(self, x, t, y=None, view=None):
            return np.full_like(x, np.inf)

    with pytest.raises(NumericError):
        simulate_reverse(SdeSpec(SCHED, 5), np.zeros((3, 1)), Bad())


def test_bad_sde_settings():
    with pytest.raises(DomainError):
        SdeSpec(SCHED, 0)
    with pytest.raises(DomainError):
        simulate_forward(SdeSpec(SCHED), np.zeros((1, 1)), 1.5)


def test_csv_roundtrip(tmp_path):
    ens = PathEnsemble(_rng.stream(0, 6).standard_normal((7, 3)), 0.25, "forward")
    ens.to_csv(tmp_path / "e.csv", ("config_hash: abc", "seed: 0"))
    back = PathEnsemble.from_csv(tmp_path / "e.csv")
    assert np.array_equal(back.samples, ens.samples)
    assert back.time == 0.25 and back.provenance == "forward"
    assert (tmp_path / "e.csv").read_text().startswith("# config_hash: abc\n# seed: 0\n")


def test_zero_score_reverse_moments():
    class Zero:
        dimension = 1

        def epsilon(self, x, t, y=None, view=None):
            return np.zeros_like(x)

    sched = NoiseSchedule(beta_min=0.1, beta_max=1.0)
    n, v1 = 40000, 0.5
    x1 = np.sqrt(v1) * _rng.stream(0, 8).standard_normal((n, 1))
    out = simulate_reverse(SdeSpec(sched, 1000, 0), x1, Zero(), t_min=0.0).samples[:, 0]
    # dv = beta (v + 1) dt backwards from t=1, so v(0) = (v1 + 1) exp(int beta) - 1
    want = (v1 + 1) * np.exp(sched.total) - 1
    assert abs(out.mean()) <= 4 * np.sqrt(want / n)
    assert out.var() == pytest.approx(want, rel=0.03)
