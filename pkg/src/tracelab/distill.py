"""Score distillation: the SDS baseline and the bridge-based (TraCe) gradient.

Both gradients are formed in canvas space and pulled back to the generator
parameters through ``render_vjp``. A run optimises one or more independent
parameter sets ("particles") in lockstep; the adapter network is shared.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np

from tracelab import __version__, _rng
from tracelab.bridge import BridgeEndpoints, posterior_sample
from tracelab.errors import ConfigError, DomainError, NumericError
from tracelab.metrics import eval_metrics
from tracelab.nn import Adam, BridgeBatch, MlpScore, bridge_score_step
from tracelab.render import Generator, ViewRanges, ViewTransform, sample_view
from tracelab.schedule import NoiseSchedule, TimeSampler
from tracelab.score import Condition, ScoreModel, cfg_combine

Method = Literal["sds", "trace"]

# stream tags for per-iteration randomness
_VIEWS, _SDS_NOISE, _BRIDGE_NOISE, _RENOISE, _PRIOR, _EVAL_VIEWS, _DUMP = range(101, 108)


@dataclass(frozen=True)
class DistillConfig:
    cfg_weight: float = 20.0
    weight_fn: Literal["constant", "sigma"] = "constant"
    t_range: tuple[float, float] = (0.02, 0.5)
    t_mode: Literal["uniform", "annealed"] = "annealed"
    t_prime_range: tuple[float, float] = (0.02, 0.7)
    t_prime_late_hi: float = 0.5
    total_iterations: int = 1700
    stage_boundary: int = 700
    eta_theta: float = 1e-3
    eta_phi: float = 1e-3
    views_per_step: int = 1
    rng_seed: int = 0
    condition: Optional[int] = 1
    renoise: bool = False
    view_ranges: ViewRanges = ViewRanges()
    eval_every: int = 100
    n_eval_views: int = 1
    n_prior_samples: int = 2000

    def __post_init__(self):
        if self.eta_theta <= 0 or self.eta_phi <= 0:
            raise ConfigError("learning rates must be positive")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if self.total_iterations > 0 and not 0 < self.stage_boundary < self.total_iterations:
            raise ConfigError("need 0 < stage_boundary < total_iterations")
        if self.weight_fn not in ("constant", "sigma"):
            raise ConfigError(f"unknown weight_fn {self.weight_fn!r}")
        if self.views_per_step < 1:
            raise ConfigError("views_per_step must be >= 1")
        if self.t_range[0] <= 0:
            raise ConfigError("bridge times must stay above 0 (sigma_t = 0 at t = 0)")

    def _seeds(self) -> tuple[int, int]:
        s = np.random.SeedSequence([self.rng_seed, 7]).generate_state(2)
        return int(s[0]), int(s[1])

    def t_sampler(self) -> TimeSampler:
        return TimeSampler(
            mode=self.t_mode, lo=self.t_range[0], hi=self.t_range[1],
            stage_boundary=self.stage_boundary, total_iterations=max(self.total_iterations, 1),
            rng_seed=self._seeds()[0],
        )

    def t_prime_sampler(self) -> TimeSampler:
        return TimeSampler(
            mode="two_stage", lo=self.t_prime_range[0], hi=self.t_prime_range[1], hi_late=self.t_prime_late_hi,
            stage_boundary=self.stage_boundary, total_iterations=max(self.total_iterations, 1),
            rng_seed=self._seeds()[1],
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def weight(cfg: DistillConfig, sched: NoiseSchedule, t) -> np.ndarray:
    if cfg.weight_fn == "constant":
        return np.ones_like(np.asarray(t, dtype=float))
    return np.sqrt(1.0 - np.asarray(sched.alpha_bar(t)))


def _col(v, like):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim)) if v.ndim else v


@dataclass(frozen=True)
class PredictedTarget:
    x0_pred: np.ndarray
    t_prime: np.ndarray | float
    eps_pretrain_output: np.ndarray


def guided_eps(model: ScoreModel, x, t, y: Condition, w: float, view=None) -> np.ndarray:
    eps_c = model.epsilon(x, t, y, view)
    if y is None or w == 1.0:
        return eps_c
    return cfg_combine(eps_c, model.epsilon(x, t, None, view), w)


def predict_x0(
    x_rndr,
    t_prime,
    y: Condition,
    pretrained: ScoreModel,
    sched: NoiseSchedule,
    cfg_weight: float = 1.0,
    view=None,
    renoise: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> PredictedTarget:
    """One-step denoised target (x - sqrt(1 - ab) eps) / sqrt(ab) at time t'.

    The rendering is fed to the noise predictor as-is; ``renoise=True`` first
    diffuses it to t' (requires ``rng``).
    """
    tp = np.asarray(t_prime, dtype=float)
    if np.any(tp <= 0.0) or np.any(tp >= 1.0):
        raise DomainError("t' must lie in (0, 1)")
    x = np.asarray(x_rndr, dtype=float)
    a = _col(sched.alpha_bar(tp), x)
    if renoise:
        x = np.sqrt(a) * x + np.sqrt(1.0 - a) * rng.standard_normal(x.shape)
    eps = guided_eps(pretrained, x, tp if tp.ndim else float(tp), y, cfg_weight, view)
    x0 = (x - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
    return PredictedTarget(x0, t_prime, eps)


def sds_canvas_grad(
    x_rndr: np.ndarray,
    t,
    eps: np.ndarray,
    y: Condition,
    pretrained: ScoreModel,
    sched: NoiseSchedule,
    cfg: DistillConfig,
    view=None,
) -> np.ndarray:
    """w(t) * (eps_pred(x_t) - eps) for x_t = sqrt(ab) x + sqrt(1 - ab) eps."""
    a = _col(sched.alpha_bar(t), x_rndr)
    x_t = np.sqrt(a) * x_rndr + np.sqrt(1.0 - a) * eps
    eps_pred = guided_eps(pretrained, x_t, t, y, cfg.cfg_weight, view)
    return _col(weight(cfg, sched, t), x_rndr) * (eps_pred - eps)


def trace_canvas_grad(
    x_rndr: np.ndarray,
    x0_pred: np.ndarray,
    t,
    z: np.ndarray,
    y: Condition,
    eps_model: ScoreModel,
    sched_bridge: NoiseSchedule,
    cfg: DistillConfig,
    view=None,
) -> tuple[np.ndarray, np.ndarray]:
    """w(t) * (eps_phi(x_t, t, y, c) - (x_t - x_rndr) / sigma_t) with x_t on the bridge.

    Returns ``(canvas_grad, x_t)``.
    """
    x_t, _ = posterior_sample(BridgeEndpoints(x0_pred, x_rndr), sched_bridge, t, None, z=z)
    sigma_t = _col(np.sqrt(sched_bridge.sigma2(t)), x_rndr)
    resid = (x_t - x_rndr) / sigma_t
    eps_phi = eps_model.epsilon(x_t, t, y, view)
    return _col(weight(cfg, sched_bridge, t), x_rndr) * (eps_phi - resid), x_t


def sds_grad(
    gen: Generator,
    theta,
    view: ViewTransform,
    y: Condition,
    pretrained: ScoreModel,
    sched: NoiseSchedule,
    cfg: DistillConfig,
    rng: np.random.Generator,
    iteration: int = 0,
) -> np.ndarray:
    """SDS parameter gradient for one view; t from the config's sampler, eps from ``rng``."""
    x = gen.render(theta, view).reshape(1, -1)
    t = cfg.t_sampler().sample(iteration)
    eps = rng.standard_normal(x.shape)
    g = sds_canvas_grad(x, t, eps, y, pretrained, sched, cfg, view)
    return gen.vjp(theta, view, g.reshape(gen.canvas_shape))


def trace_grad(
    gen: Generator,
    theta,
    view: ViewTransform,
    y: Condition,
    pretrained: ScoreModel,
    eps_model: ScoreModel,
    sched_bridge: NoiseSchedule,
    sched_pretrain: NoiseSchedule,
    cfg: DistillConfig,
    rng: np.random.Generator,
    iteration: int = 0,
) -> tuple[np.ndarray, BridgeBatch]:
    """Bridge distillation gradient (U-Net Jacobian omitted) and the adapter's training tuple."""
    x = gen.render(theta, view).reshape(1, -1)
    tp = cfg.t_prime_sampler().sample(iteration)
    target = predict_x0(x, tp, y, pretrained, sched_pretrain, cfg.cfg_weight, view, cfg.renoise, rng)
    t = np.atleast_1d(cfg.t_sampler().sample(iteration))
    z = rng.standard_normal(x.shape)
    g, x_t = trace_canvas_grad(x, target.x0_pred, t, z, y, eps_model, sched_bridge, cfg, view)
    batch = BridgeBatch(target.x0_pred, x, y, view, x_t, z, t)
    return gen.vjp(theta, view, g.reshape(gen.canvas_shape)), batch


def jacobian_corrected_canvas_grad(
    x_rndr: np.ndarray,
    canvas_grad: np.ndarray,
    x0_of: Callable[[np.ndarray], np.ndarray],
    gamma: float,
    h: float = 1e-5,
) -> np.ndarray:
    """Canvas gradient with the denoiser Jacobian kept, for small spot checks only.

    The omitted factor is ``J_pred @ dx_t/dx_rndr + I`` with
    ``dx_t/dx_rndr = gamma * J_pred + (1 - gamma) * I`` at fixed bridge noise and
    ``J_pred = d x0_pred / d x_rndr`` taken by central differences of ``x0_of``.
    """
    x = np.asarray(x_rndr, dtype=float).reshape(-1)
    d = x.size
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, j] = (x0_of(x + e) - x0_of(x - e)).reshape(-1) / (2 * h)
    dxt = gamma * jac + (1.0 - gamma) * np.eye(d)
    factor = jac @ dxt + np.eye(d)
    return np.asarray(canvas_grad, dtype=float).reshape(-1) @ factor


class DistillationAborted(NumericError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class RunRecord:
    """Append-only per-iteration log of a distillation run."""

    header: dict
    iterations: list[dict] = field(default_factory=list)
    final: Optional[dict] = None
    status: str = "ok"
    theta: Optional[np.ndarray] = None

    def append(self, entry: dict) -> None:
        if self.iterations and entry.get("iteration", 0) <= self.iterations[-1].get("iteration", -1):
            raise ValueError("run records are append-only in iteration order")
        self.iterations.append(entry)

    def lines(self) -> list[str]:
        out = [json.dumps({"kind": "header", **self.header}, sort_keys=True)]
        out += [json.dumps({"kind": "iteration", **e}, sort_keys=True) for e in self.iterations]
        out.append(json.dumps({"kind": "final", "status": self.status, **(self.final or {})}, sort_keys=True))
        return out

    def to_jsonl(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def summary(self) -> str:
        h = self.header
        lines = [
            f"method: {h.get('method')}  cfg_weight: {h.get('config', {}).get('cfg_weight')}  seed: {h.get('seed')}",
            f"status: {self.status}  iterations: {len(self.iterations)}",
        ]
        if self.final:
            for k in sorted(self.final):
                lines.append(f"{k}: {self.final[k]}")
        return "\n".join(lines) + "\n"


def _render_batch(gen: Generator, thetas: np.ndarray, views: list[ViewTransform]) -> np.ndarray:
    return np.stack([gen.render(th, v).reshape(-1) for th, v in zip(thetas, views)])


def eval_renders(gen: Generator, thetas: np.ndarray, cfg: DistillConfig) -> np.ndarray:
    """Renders of every particle under the fixed evaluation views, (P * V, D)."""
    views = [
        sample_view(_rng.stream(cfg.rng_seed, _EVAL_VIEWS, v), cfg.view_ranges) for v in range(cfg.n_eval_views)
    ]
    return np.concatenate([_render_batch(gen, thetas, [v] * len(thetas)) for v in views])


def run_distillation(
    config: DistillConfig,
    gen: Generator,
    theta0,
    prior: ScoreModel,
    eps_model: Optional[MlpScore],
    method: Method,
    sched_pretrain: NoiseSchedule,
    sched_bridge: Optional[NoiseSchedule] = None,
    header: Optional[dict] = None,
    on_iteration: Optional[Callable[[int, np.ndarray], None]] = None,
) -> RunRecord:
    """Alternating optimisation loop.

    Each iteration samples a view per particle, forms the method's canvas
    gradient, takes a plain gradient step on theta with rate ``eta_theta`` and,
    for ``trace``, one adapter step on the emitted bridge tuples. ``theta0`` is
    either one parameter set or a stack of them along a leading particle axis.
    """
    if method not in ("sds", "trace"):
        raise ConfigError(f"unknown method {method!r}")
    if method == "trace" and (eps_model is None or eps_model.adapter is None):
        raise ConfigError("trace needs an adapter-carrying noise model")
    sched_bridge = sched_bridge or sched_pretrain
    theta0 = np.asarray(theta0, dtype=float)
    single = theta0.shape == tuple(gen.param_shape)
    thetas = theta0[None].copy() if single else theta0.copy()
    n_part = thetas.shape[0]
    dim = int(np.prod(gen.canvas_shape))
    if prior.dimension != dim:
        raise ConfigError(f"prior dimension {prior.dimension} != canvas size {dim}")

    rec_header = {
        "method": method,
        "seed": config.rng_seed,
        "config": config.to_dict(),
        "code_version": __version__,
        "n_particles": n_part,
    }
    rec_header.update(header or {})
    record = RunRecord(json.loads(json.dumps(rec_header, default=_jsonable)))
    y = config.condition
    t_sampler = config.t_sampler()
    tp_sampler = config.t_prime_sampler()
    opt = Adam(eps_model.adapter.params(), lr=config.eta_phi) if method == "trace" else None
    prior_samples = prior.sample(config.n_prior_samples, y, _rng.stream(config.rng_seed, _PRIOR))

    def _metrics() -> dict:
        emb = prior.embed(eval_renders(gen, thetas, config))
        sw, mmd = eval_metrics(emb, prior_samples, seed=config.rng_seed)
        return {"sliced_w1": sw, "mmd": mmd}

    for it in range(config.total_iterations):
        vrng = _rng.stream(config.rng_seed, _VIEWS, it)
        grads = np.zeros_like(thetas)
        entry: dict = {"iteration": it}
        losses = []
        t_all, tp_all = [], []
        t_draws = t_sampler.sample(it, size=(config.views_per_step, n_part))
        tp_draws = tp_sampler.sample(it, size=(config.views_per_step, n_part))
        for b in range(config.views_per_step):
            views = [sample_view(vrng, config.view_ranges) for _ in range(n_part)]
            vfeat = np.stack([v.coefficients() for v in views])
            x = _render_batch(gen, thetas, views)
            key = it * config.views_per_step + b
            if method == "sds":
                t = t_draws[b]
                eps = _rng.stream(config.rng_seed, _SDS_NOISE, key).standard_normal(x.shape)
                g = sds_canvas_grad(x, t, eps, y, prior, sched_pretrain, config, vfeat)
            else:
                tp, t = tp_draws[b], t_draws[b]
                target = predict_x0(
                    x, tp, y, prior, sched_pretrain, config.cfg_weight, vfeat, config.renoise,
                    _rng.stream(config.rng_seed, _RENOISE, key),
                )
                z = _rng.stream(config.rng_seed, _BRIDGE_NOISE, key).standard_normal(x.shape)
                g, x_t = trace_canvas_grad(x, target.x0_pred, t, z, y, eps_model, sched_bridge, config, vfeat)
                e = eps_model.embed
                batch = BridgeBatch(e(target.x0_pred), e(x), y, vfeat, e(x_t), e(z), t)
                tp_all.append(tp)
            t_all.append(t)
            for j in range(n_part):
                grads[j] += gen.vjp(thetas[j], views[j], g[j].reshape(gen.canvas_shape)) / config.views_per_step
            if method == "trace":
                losses.append(bridge_score_step(eps_model.model, eps_model.adapter, batch, sched_bridge, opt))
        thetas -= config.eta_theta * grads
        entry["t_mean"] = float(np.mean(t_all))
        if tp_all:
            entry["t_prime_mean"] = float(np.mean(tp_all))
        entry["grad_norm"] = float(np.sqrt(np.sum(grads * grads) / n_part))
        if losses:
            entry["adapter_loss"] = float(np.mean(losses))
        if not np.all(np.isfinite(thetas)):
            entry["status"] = "nan_abort"
            record.append(entry)
            record.status = "nan_abort"
            record.final = {"iteration": it}
            record.theta = thetas[0] if single else thetas
            raise DistillationAborted(f"non-finite parameters after iteration {it}", record)
        if config.eval_every and (it % config.eval_every == 0 or it == config.total_iterations - 1):
            entry.update(_metrics())
        record.append(entry)
        if on_iteration is not None:
            on_iteration(it, thetas)

    record.final = _metrics()
    record.theta = thetas[0] if single else thetas
    return record


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


@dataclass(frozen=True)
class GradientField:
    mean: np.ndarray
    magnitude: np.ndarray
    variance: np.ndarray


def gradient_field(
    gen: Generator,
    theta,
    method: Method,
    config: DistillConfig,
    pretrained: ScoreModel,
    sched_pretrain: NoiseSchedule,
    eps_model: Optional[ScoreModel] = None,
    sched_bridge: Optional[NoiseSchedule] = None,
    view: Optional[ViewTransform] = None,
    n_draws: int = 256,
    iteration: int = 0,
) -> GradientField:
    """Canvas-space gradient statistics over ``n_draws`` (t, noise) draws at a fixed view."""
    sched_bridge = sched_bridge or sched_pretrain
    view = view or ViewTransform.identity()
    x = gen.render(theta, view).reshape(1, -1)
    xs = np.repeat(x, n_draws, axis=0)
    rng = _rng.stream(config.rng_seed, _DUMP, 0 if method == "sds" else 1)
    lo, hi = config.t_sampler().window(iteration)
    t = rng.uniform(lo, hi, size=n_draws)
    noise = rng.standard_normal(xs.shape)
    vfeat = view.coefficients()
    y = config.condition
    if method == "sds":
        g = sds_canvas_grad(xs, t, noise, y, pretrained, sched_pretrain, config, vfeat)
    else:
        if eps_model is None:
            raise ConfigError("trace gradient field needs the adapter noise model")
        lo_p, hi_p = config.t_prime_sampler().window(iteration)
        tp = rng.uniform(lo_p, hi_p, size=n_draws)
        target = predict_x0(xs, tp, y, pretrained, sched_pretrain, config.cfg_weight, vfeat, config.renoise, rng)
        g, _ = trace_canvas_grad(xs, target.x0_pred, t, noise, y, eps_model, sched_bridge, config, vfeat)
    shape = gen.canvas_shape
    mean = g.mean(axis=0).reshape(shape)
    var = g.var(axis=0).reshape(shape)
    mag = np.sqrt(np.sum(mean * mean, axis=-1))
    return GradientField(mean, mag, var)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def gradient_grid(
    points,
    method: Method,
    config: DistillConfig,
    pretrained: ScoreModel,
    sched_pretrain: NoiseSchedule,
    eps_model: Optional[ScoreModel] = None,
    sched_bridge: Optional[NoiseSchedule] = None,
    n_draws: int = 64,
    iteration: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the canvas gradient at each canvas point in ``points`` (P, D).

    Times are drawn from the samplers' windows at ``iteration``; the view is the identity.
    """
    sched_bridge = sched_bridge or sched_pretrain
    pts = np.asarray(points, dtype=float)
    n, d = pts.shape
    xs = np.repeat(pts, n_draws, axis=0)
    rng = _rng.stream(config.rng_seed, _DUMP, iteration, 0 if method == "sds" else 1)
    lo, hi = config.t_sampler().window(iteration)
    t = rng.uniform(lo, hi, size=xs.shape[0])
    noise = rng.standard_normal(xs.shape)
    y = config.condition
    if method == "sds":
        g = sds_canvas_grad(xs, t, noise, y, pretrained, sched_pretrain, config)
    else:
        if eps_model is None:
            raise ConfigError("trace gradient field needs the adapter noise model")
        lo_p, hi_p = config.t_prime_sampler().window(iteration)
        tp = rng.uniform(lo_p, hi_p, size=xs.shape[0])
        target = predict_x0(xs, tp, y, pretrained, sched_pretrain, config.cfg_weight, None, config.renoise, rng)
        g, _ = trace_canvas_grad(xs, target.x0_pred, t, noise, y, eps_model, sched_bridge, config)
    g = g.reshape(n, n_draws, d)
    return g.mean(axis=1), g.var(axis=1)
