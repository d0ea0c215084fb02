import json

import numpy as np
import pytest

from tracelab import _rng
from tracelab.errors import ConfigError, DomainError, TrainingError
from tracelab.nn import (
    Adam,
    BridgeBatch,
    DsmHyper,
    InputLayout,
    MlpBatch,
    MlpScore,
    bridge_score_step,
    encode_inputs,
    init_adapter,
    init_mlp,
    load_snapshot,
    mlp_forward,
    mlp_grad,
    mse_to_optimal,
    save_snapshot,
    train_dsm,
)
from tracelab.schedule import NoiseSchedule
from tracelab.score import GmmDistribution, random_orthonormal

SCHED = NoiseSchedule()
LAYOUT = InputLayout(2, 2)


def _model(seed=0, act="silu"):
    return init_mlp(LAYOUT, hidden=(8, 8), activation=act, seed=seed, output_scale=1.0)


def _fd_check(model, adapter, batch, spec, h=1e-6):
    _, grads = mlp_grad(model, adapter, batch, spec)
    params = model.params() if spec == "base" else adapter.params()
    worst = 0.0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp, _ = mlp_grad(model, adapter, batch, spec)
            arr[idx] = old - h
            lm, _ = mlp_grad(model, adapter, batch, spec)
            arr[idx] = old
            worst = max(worst, abs((lp - lm) / (2 * h) - grads[name][idx]) / max(np.max(np.abs(grads[name])), 1e-8))
    return worst


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("spec", ["base", "adapter"])
def test_backprop_matches_finite_differences(seed, spec):
    rng = _rng.stream(seed, 1)
    model = _model(seed, "tanh" if seed % 2 else "silu")
    adapter = init_adapter(model, rank=2, seed=seed, b_std=0.5)
    for a in adapter.A:
        a[...] = rng.standard_normal(a.shape) * 0.5
    y = None if seed % 3 == 0 else seed % 2
    batch = MlpBatch(rng.standard_normal((5, 2)), rng.uniform(0.05, 1.0, 5), rng.standard_normal((5, 2)), y,
                     rng.standard_normal((5, 6)))
    assert _fd_check(model, adapter, batch, spec) < 1e-5


def test_fresh_adapter_is_bitwise_neutral():
    model = _model()
    adapter = init_adapter(model, rank=4)
    x = _rng.stream(0, 2).standard_normal((16, 2))
    assert np.array_equal(mlp_forward(model, adapter, x, 0.3, 1), mlp_forward(model, None, x, 0.3, 1))


def test_adapter_skips_narrow_layers():
    model = init_mlp(LAYOUT, hidden=(16, 16))
    adapter = init_adapter(model, rank=4)
    # the output layer has fan-out 2 <= rank, so only the hidden layers adapt
    assert adapter.layers == (0, 1)
    with pytest.raises(ConfigError):
        init_adapter(model, rank=0)


def test_encoding_slots():
    enc = encode_inputs(LAYOUT, np.zeros((3, 2)), 0.5, None, None)
    assert enc.shape == (3, LAYOUT.in_dim)
    onehot = enc[:, 2 + 16: 2 + 16 + 3]
    assert np.array_equal(onehot, np.tile([0, 0, 1.0], (3, 1)))
    with pytest.raises(DomainError):
        encode_inputs(LAYOUT, np.zeros((3, 2)), 0.5, 2, None)
    with pytest.raises(DomainError):
        encode_inputs(LAYOUT, np.zeros((3, 3)), 0.5, 0, None)


def test_zero_step_training_keeps_init():
    model = _model()
    before = model.fingerprint()
    rep = train_dsm(model, GmmDistribution([1.0], [[0.0, 0.0]], 1.0), SCHED, DsmHyper(steps=0))
    assert model.fingerprint() == before == rep.snapshot_id


def test_training_is_deterministic():
    target = GmmDistribution([1.0], [[1.0, -1.0]], 0.5)
    m1, m2 = init_mlp(InputLayout(2, 1), (16, 16)), init_mlp(InputLayout(2, 1), (16, 16))
    r1 = train_dsm(m1, target, SCHED, DsmHyper(steps=50, seed=4))
    r2 = train_dsm(m2, target, SCHED, DsmHyper(steps=50, seed=4))
    assert r1.snapshot_id == r2.snapshot_id and r1.losses == r2.losses


def test_training_reduces_error():
    target = GmmDistribution([1.0], [[1.0, -1.0]], 0.5)
    model = init_mlp(InputLayout(2, 1), (32, 32))
    before = mse_to_optimal(model, target, SCHED, 0)
    train_dsm(model, target, SCHED, DsmHyper(steps=400, seed=0))
    assert mse_to_optimal(model, target, SCHED, 0) < 0.5 * before


def test_divergence_detected():
    model = init_mlp(InputLayout(2, 1), (8, 8))
    with pytest.raises(TrainingError):
        train_dsm(model, GmmDistribution([1.0], [[0.0, 0.0]], 1.0), SCHED, DsmHyper(steps=200, lr=1e6))


def test_bridge_step_leaves_base_untouched():
    model = _model()
    base_fp = model.fingerprint()
    adapter = init_adapter(model, rank=2)
    ad_fp = adapter.fingerprint()
    rng = _rng.stream(0, 3)
    batch = BridgeBatch(rng.standard_normal((8, 2)), rng.standard_normal((8, 2)), 1)
    bridge_score_step(model, adapter, batch, SCHED, Adam(adapter.params()), rng)
    assert model.fingerprint() == base_fp
    assert adapter.fingerprint() != ad_fp


def test_projected_mlp_score():
    model = _model()
    proj = random_orthonormal(2, 5, _rng.stream(0, 4))
    score = MlpScore(model, None, proj)
    x = _rng.stream(0, 5).standard_normal((3, 5))
    assert score.dimension == 5
    np.testing.assert_allclose(score.epsilon(x, 0.4, 0), mlp_forward(model, None, x @ proj.T, 0.4, 0) @ proj)


def test_snapshot_roundtrip(tmp_path):
    model = _model()
    adapter = init_adapter(model, rank=2, b_std=0.3)
    adapter.A[0][...] = 0.7
    stem = tmp_path / "nested" / "base.v1.5"
    save_snapshot(stem, model, adapter, extra={"config_hash": "abc", "seed": 0})
    manifest = json.loads((tmp_path / "nested" / "base.v1.5.json").read_text())
    assert manifest["format"] == "tracelab-snapshot" and manifest["extra"]["seed"] == 0
    m2, a2 = load_snapshot(stem)
    assert m2.fingerprint() == model.fingerprint()
    assert a2.fingerprint() == adapter.fingerprint() and a2.layers == adapter.layers
    m3, _ = load_snapshot(tmp_path / "nested" / "base.v1.5.json")
    assert m3.fingerprint() == model.fingerprint()
