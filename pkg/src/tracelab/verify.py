"""Self-check suite: every closed-form identity the library relies on, re-measured.

Each check returns a measured value and a tolerance. The report is plain JSON
with no timing information, so reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

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
from tracelab.distill import DistillConfig, predict_x0, sds_canvas_grad, trace_canvas_grad
from tracelab.metrics import sliced_w1
from tracelab.nn import InputLayout, MlpBatch, init_adapter, init_mlp, mlp_forward, mlp_grad
from tracelab.render import DirectField, Splat2D, ViewTransform, random_splats
from tracelab.schedule import NoiseSchedule
from tracelab.score import (
    AnalyticScore,
    GmmDistribution,
    GmmFamily,
    cfg_combine,
    default_family,
    eps_from_score,
    score_from_eps,
)
from tracelab.sde import SdeSpec, reverse_drift, simulate_forward, simulate_reverse


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""


def _le(name: str, value: float, tol: float, detail: str = "") -> Check:
    value = float(value)
    return Check(name, value, float(tol), bool(np.isfinite(value) and value <= tol), detail)


class _Stub:
    """Noise model returning a fixed array; used for the zero-residual checks."""

    def __init__(self, fn):
        self.fn = fn
        self.dimension = 0

    def epsilon(self, x, t, y=None, view=None):
        return self.fn(np.asarray(x, dtype=float), t)


# schedule ------------------------------------------------------------------------


def check_schedule_identities(sched: NoiseSchedule | None = None) -> Check:
    sched = sched or NoiseSchedule()
    t = np.linspace(0.0, 1.0, 101)
    s2, sb2 = sched.accumulated_variances(t)
    gamma, big = sched.bridge_coefficients(t)
    g0, b0 = sched.bridge_coefficients(0.0)
    g1, b1 = sched.bridge_coefficients(1.0)
    err = max(
        np.max(np.abs(s2 + sb2 - sched.sigma2(1.0))),
        abs(g0 - 1.0), abs(g1), abs(b0), abs(b1),
        np.max(np.abs(gamma - sb2 / (s2 + sb2))),
    )
    return _le("schedule.identities", err, 1e-10, "sigma2 + sigma_bar2 = total; gamma(0)=1, gamma(1)=0, Sigma(0)=Sigma(1)=0")


def check_schedule_values(sched: NoiseSchedule | None = None) -> Check:
    sched = sched or NoiseSchedule()
    # linear 0.1 -> 20: sigma2(t) = 0.1 t + 9.95 t^2
    s2, sb2 = 0.1 * 0.5 + 9.95 * 0.25, 10.05 - (0.1 * 0.5 + 9.95 * 0.25)
    want = np.array([s2, sb2, sb2 / 10.05, s2 * sb2 / 10.05, np.exp(-s2)])
    got_s2, got_sb2 = sched.accumulated_variances(0.5)
    g, big = sched.bridge_coefficients(0.5)
    got = np.array([got_s2, got_sb2, g, big, sched.alpha_bar(0.5)])
    return _le("schedule.values_t0.5", np.max(np.abs(got - want)), 1e-12, "closed-form values of the linear schedule at t=0.5")


def check_cosine_schedule() -> Check:
    sched = NoiseSchedule("cosine")
    t = np.linspace(0.0, 1.0, 21)
    s2, sb2 = sched.accumulated_variances(t)
    return _le("schedule.cosine_total", np.max(np.abs(s2 + sb2 - sched.total)), 1e-8,
               "independently integrated halves of the cosine schedule add up")


# bridge ----------------------------------------------------------------------------


def check_endpoint_pinning(sched: NoiseSchedule | None = None) -> Check:
    sched = sched or NoiseSchedule()
    rng = _rng.stream(0, 901)
    a, b = rng.standard_normal((2, 64, 5)) * 3.0
    ends = BridgeEndpoints(a, b)
    x0, _ = posterior_sample(ends, sched, 0.0, rng)
    x1, _ = posterior_sample(ends, sched, 1.0, rng)
    mismatches = int(np.sum(x0 != a) + np.sum(x1 != b))
    return Check("bridge.endpoint_pinning", float(mismatches), 0.0, mismatches == 0, "bitwise equality at t=0 and t=1")


def _bridge_ensemble(sched: NoiseSchedule, n_paths: int, n_steps: int):
    # endpoints far apart so that a small error in gamma moves the mean by many standard errors
    ends = BridgeEndpoints(np.array([-70.0, 70.0]), np.array([70.0, -70.0]))
    path = simulate_bridge_sde(ends, sched, n_steps=n_steps, n_paths=n_paths, seed=0)
    return ends, path


def check_bridge_moments(sched: NoiseSchedule | None = None, n_paths: int = 20000, n_steps: int = 1000) -> list[Check]:
    sched = sched or NoiseSchedule()
    ends, path = _bridge_ensemble(sched, n_paths, n_steps)
    zs, rel = [], []
    for t in (0.25, 0.5, 0.75):
        x = path.at(t)
        params = posterior_params(ends, sched, t)
        se = x.std(axis=0, ddof=1) / np.sqrt(n_paths)
        zs.append(np.max(np.abs(x.mean(axis=0) - params.mu) / se))
        rel.append(np.max(np.abs(x.var(axis=0, ddof=1) / params.big_sigma - 1.0)))
    return [
        _le("bridge.moments_mean", max(zs), 4.0, "pinned SDE mean vs gamma-interpolated mean, in MC standard errors"),
        _le("bridge.moments_var", max(rel), 0.05, "pinned SDE variance vs closed-form bridge variance, relative"),
    ]


# collapse of the bridge to the score-based model ---------------------------------------


def _collapse_grid():
    g = np.linspace(-5.0, 5.0, 50)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1), np.linspace(0.1, 0.9, 9)


def check_duality(sched: NoiseSchedule | None = None) -> Check:
    sched = sched or NoiseSchedule()
    p = default_family().unconditional
    fac = degenerate_factors(p, sched)
    x, ts = _collapse_grid()
    err = max(np.max(np.abs(duality_residual(fac, x, t))) for t in ts)
    return _le("collapse.duality", err, 1e-12, "Psi * Psi_hat - marginal on a 50x50x9 grid")


def check_drift_agreement(sched: NoiseSchedule | None = None) -> Check:
    sched = sched or NoiseSchedule()
    p = default_family().unconditional
    fac = degenerate_factors(p, sched)
    x, ts = _collapse_grid()
    err = 0.0
    for t in ts:
        sb = sb_backward_drift(fac, sched, x, t)
        sgm = reverse_drift(sched, x, t, p.noisy_score(sched, x, t))
        err = max(err, float(np.max(np.abs(sb - sgm))))
    return _le("collapse.drift", err, 1e-12, "bridge backward drift vs reverse-SDE drift with the exact score")


def check_reverse_recovery(n: int = 20000, n_steps: int = 1000) -> Check:
    sched = NoiseSchedule()
    fam = default_family()
    x1 = _rng.stream(0, 902).standard_normal((n, 2))
    out = simulate_reverse(SdeSpec(sched, n_steps, rng_seed=0), x1, AnalyticScore(fam, sched), y=1).samples
    ref = fam.condition(1).sample(n, _rng.stream(0, 903))
    return _le("collapse.reverse_recovery", sliced_w1(out, ref), 0.05, "reverse SDE from N(0, I) with the exact score")


# score and SDE -------------------------------------------------------------------------


def check_eps_roundtrip() -> Check:
    sched = NoiseSchedule()
    rng = _rng.stream(0, 904)
    s = rng.standard_normal((200, 3))
    t = rng.uniform(0.01, 1.0, size=200)
    back = score_from_eps(eps_from_score(s, sched, t), sched, t)
    return _le("score.eps_roundtrip", np.max(np.abs(back - s) / (1.0 + np.abs(s))), 1e-12)


def check_gaussian_score() -> Check:
    sched = NoiseSchedule()
    mu, var = np.array([1.0, -2.0]), np.array([0.5, 2.0])
    p = GmmDistribution(np.ones(1), mu[None], var[None])
    x = _rng.stream(0, 905).standard_normal((100, 2)) * 2.0
    err = 0.0
    for t in (0.05, 0.3, 0.7, 1.0):
        a = sched.alpha_bar(t)
        want = -(x - np.sqrt(a) * mu) / (a * var + 1.0 - a)
        err = max(err, float(np.max(np.abs(p.noisy_score(sched, x, t) - want))))
    return _le("score.gaussian_closed_form", err, 1e-12)


def check_cfg_affine() -> Check:
    rng = _rng.stream(0, 906)
    ec, eu = rng.standard_normal((2, 50, 4))
    w1, w2 = 3.0, 40.0
    lhs = cfg_combine(ec, eu, w1) + cfg_combine(ec, eu, w2)
    rhs = 2.0 * cfg_combine(ec, eu, 0.5 * (w1 + w2))
    return _le("score.cfg_affine", np.max(np.abs(lhs - rhs)), 1e-12)


def check_forward_moments() -> Check:
    sched = NoiseSchedule()
    n, mu, s2 = 20000, 2.0, 0.25
    x0 = mu + np.sqrt(s2) * _rng.stream(0, 907).standard_normal((n, 1))
    out = simulate_forward(SdeSpec(sched, 1000, rng_seed=0), x0, 0.5).samples[:, 0]
    a = sched.alpha_bar(0.5)
    m, v = np.sqrt(a) * mu, a * s2 + 1.0 - a
    z = abs(out.mean() - m) / np.sqrt(v / n)
    return _le("sde.forward_moments", max(z / 4.0, abs(out.var() / v - 1.0) / 0.05), 1.0,
               "forward SDE vs VP marginal: mean within 4 SE and variance within 5% (scaled to 1)")


# differentiation --------------------------------------------------------------------


def check_splat_vjp(n_instances: int = 20, h: float = 1e-6) -> Check:
    gen = Splat2D(height=12, width=12, channels=1, n_splats=3)
    worst = 0.0
    for k in range(n_instances):
        rng = _rng.stream(k, 908)
        theta = random_splats(gen, rng, spread=3.0)
        view = ViewTransform.from_params(rng.uniform(0.7, 1.3), rng.uniform(0, 2 * np.pi), rng.uniform(-1, 1, 2))
        w = rng.standard_normal(gen.canvas_shape)
        an = gen.vjp(theta, view, w)
        fd = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            e = np.zeros_like(theta)
            e[idx] = h
            fd[idx] = np.sum(w * (gen.render(theta + e, view) - gen.render(theta - e, view))) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - an)) / max(np.max(np.abs(an)), 1e-12)))
    return _le("render.splat_vjp", worst, 1e-4, "central differences vs hand-derived VJP, max relative error")


def check_direct_adjoint(n_instances: int = 20) -> Check:
    gen = DirectField(6, 5, 2)
    worst = 0.0
    for k in range(n_instances):
        rng = _rng.stream(k, 909)
        view = ViewTransform.from_params(rng.uniform(0.5, 1.5), rng.uniform(0, 2 * np.pi), rng.uniform(-1, 1, 2))
        v = rng.standard_normal(gen.param_shape)
        w = rng.standard_normal(gen.canvas_shape)
        lhs = np.sum(w * gen.render(v, view))
        rhs = np.sum(v * gen.vjp(v, view, w))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1.0))
    return _le("render.direct_adjoint", worst, 1e-12, "<w, R v> = <R^T w, v> for the bilinear resampler")


def _mlp_fd_error(seed: int, spec: str, h: float = 1e-6) -> float:
    rng = _rng.stream(seed, 910)
    layout = InputLayout(2, 2)
    model = init_mlp(layout, hidden=(8, 8), activation="silu" if seed % 2 else "tanh", seed=seed, output_scale=1.0)
    adapter = init_adapter(model, rank=2, seed=seed, b_std=0.5)
    for a in adapter.A:
        a[...] = rng.standard_normal(a.shape) * 0.5
    batch = MlpBatch(rng.standard_normal((5, 2)), rng.uniform(0.05, 1.0, 5), rng.standard_normal((5, 2)), y=seed % 2)
    _, grads = mlp_grad(model, adapter, batch, spec)
    params = model.params() if spec == "base" else adapter.params()
    worst = 0.0
    for name, arr in params.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp, _ = mlp_grad(model, adapter, batch, spec)
            arr[idx] = old - h
            lm, _ = mlp_grad(model, adapter, batch, spec)
            arr[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - grads[name])) / max(np.max(np.abs(grads[name])), 1e-8)))
    return worst


def check_mlp_backprop(n_instances: int = 20) -> Check:
    worst = max(max(_mlp_fd_error(k, "base"), _mlp_fd_error(k, "adapter")) for k in range(n_instances))
    return _le("nn.backprop", worst, 1e-5, "central differences vs backprop for base and adapter parameters")


def check_adapter_zero_init() -> Check:
    model = init_mlp(InputLayout(2, 2), seed=3, output_scale=1.0)
    adapter = init_adapter(model, rank=4, seed=3)
    x = _rng.stream(0, 911).standard_normal((32, 2))
    t = np.linspace(0.05, 0.95, 32)
    diff = np.max(np.abs(mlp_forward(model, adapter, x, t, 1) - mlp_forward(model, None, x, t, 1)))
    return Check("nn.adapter_zero_init", float(diff), 0.0, bool(diff == 0.0), "A = 0 leaves the base output bitwise unchanged")


# distillation -----------------------------------------------------------------------


def check_predict_x0_inversion() -> Check:
    sched = NoiseSchedule()
    rng = _rng.stream(0, 912)
    x_star = rng.standard_normal((40, 4)) * 2.0
    x_rndr = rng.standard_normal((40, 4)) * 2.0
    err = 0.0
    for tp in (0.05, 0.3, 0.7):
        a = sched.alpha_bar(tp)
        planted = _Stub(lambda x, t, a=a: (x - np.sqrt(a) * x_star) / np.sqrt(1.0 - a))
        got = predict_x0(x_rndr, tp, None, planted, sched).x0_pred
        err = max(err, float(np.max(np.abs(got - x_star))))
    return _le("distill.predict_x0_inversion", err, 1e-12)


def check_zero_stubs() -> list[Check]:
    sched = NoiseSchedule()
    cfg = DistillConfig(cfg_weight=1.0)
    rng = _rng.stream(0, 913)
    gen = DirectField(3, 3, 1)
    theta = rng.standard_normal(gen.param_shape)
    x = gen.render(theta, ViewTransform.identity()).reshape(1, -1)
    eps = rng.standard_normal(x.shape)
    t = np.array([0.3])

    # SDS: the model returns exactly the injected noise
    sds = sds_canvas_grad(x, t, eps, None, _Stub(lambda xt, tt: eps), sched, cfg)
    g_sds = gen.vjp(theta, ViewTransform.identity(), sds.reshape(gen.canvas_shape))

    # TraCe: the model returns exactly (x_t - x_rndr) / sigma_t
    x0 = rng.standard_normal(x.shape)
    z = rng.standard_normal(x.shape)
    sig = np.sqrt(sched.sigma2(t))[:, None]
    trace, _ = trace_canvas_grad(x, x0, t, z, None, _Stub(lambda xt, tt: (xt - x) / sig), sched, cfg)
    g_trace = gen.vjp(theta, ViewTransform.identity(), trace.reshape(gen.canvas_shape))
    return [
        Check("distill.sds_zero_stub", float(np.max(np.abs(g_sds))), 0.0, bool(np.all(g_sds == 0.0))),
        Check("distill.trace_zero_stub", float(np.max(np.abs(g_trace))), 0.0, bool(np.all(g_trace == 0.0))),
    ]


def check_metric_identity() -> Check:
    a = _rng.stream(0, 914).standard_normal((500, 3))
    return _le("metrics.self_distance", sliced_w1(a, a.copy()), 1e-12)


CHECKS: list[Callable[[], Check | list[Check]]] = [
    check_schedule_identities,
    check_schedule_values,
    check_cosine_schedule,
    check_endpoint_pinning,
    check_bridge_moments,
    check_duality,
    check_drift_agreement,
    check_reverse_recovery,
    check_eps_roundtrip,
    check_gaussian_score,
    check_cfg_affine,
    check_forward_moments,
    check_splat_vjp,
    check_direct_adjoint,
    check_mlp_backprop,
    check_adapter_zero_init,
    check_predict_x0_inversion,
    check_zero_stubs,
    check_metric_identity,
]


def run_checks(checks=None) -> list[Check]:
    out: list[Check] = []
    for fn in checks or CHECKS:
        res = fn()
        out.extend(res if isinstance(res, list) else [res])
    return out


def report(results: list[Check]) -> str:
    payload = {
        "passed": all(c.passed for c in results),
        "n_checks": len(results),
        "checks": [asdict(c) for c in results],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
