"""Small fully connected noise predictor with manual backpropagation.

Inputs are the concatenation of the state ``x``, sinusoidal time features,
a one-hot condition (last slot = unconditional) and the six affine view
coefficients. A frozen base network can carry a trainable low-rank residual
adapter: layer ``l`` computes ``h @ (W + scale * A @ B) + b``.
"""

from __future__ import annotations

import hashlib
import json
import time as _time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional

import numpy as np
from scipy.special import expit

from tracelab import _rng
from tracelab.bridge import BridgeEndpoints, posterior_sample
from tracelab.errors import ConfigError, DomainError, TrainingError
from tracelab.schedule import NoiseSchedule
from tracelab.score import Condition, GmmDistribution, GmmFamily, eps_from_score

N_FREQ = 8
VIEW_DIM = 6
IDENTITY_VIEW = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
# geometric ladder of angular frequencies for the time features
FREQS = np.pi * np.geomspace(1.0, 64.0, N_FREQ)


@dataclass(frozen=True)
class InputLayout:
    x_dim: int
    n_conditions: int = 0

    @property
    def in_dim(self) -> int:
        return self.x_dim + 2 * N_FREQ + self.n_conditions + 1 + VIEW_DIM


def time_features(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    ang = t[:, None] * FREQS
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def view_features(view, n: int) -> np.ndarray:
    if view is None:
        return np.broadcast_to(IDENTITY_VIEW, (n, VIEW_DIM))
    if hasattr(view, "coefficients"):
        return np.broadcast_to(view.coefficients(), (n, VIEW_DIM))
    arr = np.asarray(view, dtype=float)
    return np.broadcast_to(arr, (n, VIEW_DIM))


def encode_inputs(layout: InputLayout, x, t, y: Condition, view) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != layout.x_dim:
        raise DomainError(f"expected state dimension {layout.x_dim}, got {x.shape[1]}")
    n = x.shape[0]
    onehot = np.zeros((n, layout.n_conditions + 1))
    if y is None:
        onehot[:, -1] = 1.0
    else:
        ys = np.broadcast_to(np.asarray(y), (n,))
        if np.any(ys < 0) or np.any(ys >= layout.n_conditions):
            raise DomainError(f"condition {y} outside [0, {layout.n_conditions})")
        onehot[np.arange(n), ys] = 1.0
    return np.concatenate([x, time_features(t, n), onehot, view_features(view, n)], axis=1)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return z * expit(z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class Mlp:
    layout: InputLayout
    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Literal["tanh", "silu"] = "silu"

    def __post_init__(self):
        if self.activation not in ("tanh", "silu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.widths[0] != self.layout.in_dim or self.widths[-1] != self.layout.x_dim:
            raise ConfigError("widths must start at the input layout size and end at the state dimension")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ConfigError(f"layer {i} has incompatible shapes {w.shape}, {b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def copy(self) -> Mlp:
        return Mlp(self.layout, list(self.widths), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.activation)

    def fingerprint(self) -> str:
        return _fingerprint(self.params())


def init_mlp(
    layout: InputLayout,
    hidden: Iterable[int] = (64, 64),
    activation: str = "silu",
    seed: int = 0,
    output_scale: float = 0.0,
) -> Mlp:
    """He-style init; the output layer is scaled by ``output_scale`` (0 => predicts zero)."""
    rng = _rng.stream(seed, 11)
    widths = [layout.in_dim, *hidden, layout.x_dim]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        w = rng.standard_normal((widths[i], widths[i + 1])) * np.sqrt(1.0 / widths[i])
        if i == len(widths) - 2:
            w = w * output_scale
        weights.append(w)
        biases.append(np.zeros(widths[i + 1]))
    return Mlp(layout, widths, weights, biases, activation)


@dataclass
class AdapterParams:
    """Low-rank residuals ``scale * A @ B`` on the layers listed in ``layers``.

    A is (fan_in, rank), B is (rank, fan_out). A starts at zero so a fresh
    adapter leaves the base network's output unchanged.
    """

    layers: tuple[int, ...]
    A: list[np.ndarray]
    B: list[np.ndarray]
    rank: int
    scale: float = 1.0

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for l, a, b in zip(self.layers, self.A, self.B):
            out[f"A{l}"] = a
            out[f"B{l}"] = b
        return out

    def copy(self) -> AdapterParams:
        return AdapterParams(self.layers, [a.copy() for a in self.A], [b.copy() for b in self.B], self.rank, self.scale)

    def fingerprint(self) -> str:
        return _fingerprint(self.params())


def init_adapter(model: Mlp, rank: int = 4, scale: float = 1.0, seed: int = 0, b_std: float = 0.01) -> AdapterParams:
    """Adapt every layer whose fan-in and fan-out both exceed ``rank``."""
    if rank < 1:
        raise ConfigError("adapter rank must be >= 1")
    layers = tuple(i for i in range(model.n_layers) if rank < min(model.widths[i], model.widths[i + 1]))
    if not layers:
        raise ConfigError(f"rank {rank} is not below any layer width of {model.widths}")
    rng = _rng.stream(seed, 12)
    A = [np.zeros((model.widths[l], rank)) for l in layers]
    B = [rng.standard_normal((rank, model.widths[l + 1])) * b_std for l in layers]
    return AdapterParams(layers, A, B, rank, scale)


def _fingerprint(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _forward(model: Mlp, adapter: Optional[AdapterParams], inputs: np.ndarray):
    idx = {} if adapter is None else {l: k for k, l in enumerate(adapter.layers)}
    h = inputs
    cache = []
    for i in range(model.n_layers):
        z = h @ model.weights[i] + model.biases[i]
        ha = None
        if i in idx:
            k = idx[i]
            ha = h @ adapter.A[k]
            z = z + adapter.scale * (ha @ adapter.B[k])
        cache.append((h, z, ha))
        h = _act(model.activation, z) if i < model.n_layers - 1 else z
    return h, cache


def mlp_forward(model: Mlp, adapter: Optional[AdapterParams], x, t, y: Condition = None, view=None) -> np.ndarray:
    """Noise prediction for a batch of states; pure and deterministic."""
    out, _ = _forward(model, adapter, encode_inputs(model.layout, x, t, y, view))
    return out


@dataclass(frozen=True)
class MlpBatch:
    x: np.ndarray
    t: np.ndarray
    target: np.ndarray
    y: Condition = None
    view: object = None


def mlp_grad(
    model: Mlp,
    adapter: Optional[AdapterParams],
    batch: MlpBatch,
    loss_spec: Literal["base", "adapter"] = "base",
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss mean_i ||f(x_i) - target_i||^2 and its gradient w.r.t. the trainable set.

    With ``loss_spec="adapter"`` only adapter matrices receive gradients; base
    weights are absent from the result.
    """
    if loss_spec not in ("base", "adapter"):
        raise ConfigError(f"unknown loss spec {loss_spec!r}")
    if loss_spec == "adapter" and adapter is None:
        raise ConfigError("adapter loss requested without an adapter")
    inputs = encode_inputs(model.layout, batch.x, batch.t, batch.y, batch.view)
    pred, cache = _forward(model, adapter, inputs)
    n = pred.shape[0]
    resid = pred - np.asarray(batch.target, dtype=float)
    loss = float(np.sum(resid * resid) / n)
    grads: dict[str, np.ndarray] = {}
    idx = {} if adapter is None else {l: k for k, l in enumerate(adapter.layers)}
    dz = 2.0 * resid / n
    for i in reversed(range(model.n_layers)):
        h, z, ha = cache[i]
        if i < model.n_layers - 1:
            dz = dz * _act_grad(model.activation, z)
        if loss_spec == "base":
            grads[f"W{i}"] = h.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
        elif i in idx:
            k = idx[i]
            s = adapter.scale
            grads[f"B{i}"] = s * (ha.T @ dz)
            grads[f"A{i}"] = s * (h.T @ (dz @ adapter.B[k].T))
        if i > 0:
            w_eff_t = model.weights[i].T
            dh = dz @ w_eff_t
            if i in idx:
                k = idx[i]
                dh = dh + adapter.scale * ((dz @ adapter.B[k].T) @ adapter.A[k].T)
            dz = dh
    return loss, grads


class Adam:
    """Adaptive-moment optimiser updating the given arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    losses: list[float]
    snapshot_id: str
    wall_seconds: float

    def to_dict(self) -> dict:
        return {"losses": self.losses, "snapshot_id": self.snapshot_id, "wall_seconds": self.wall_seconds}


@dataclass(frozen=True)
class DsmHyper:
    steps: int = 20_000
    batch_size: int = 128
    lr: float = 1e-3
    t_range: tuple[float, float] = (0.02, 1.0)
    uncond_prob: float = 0.2
    seed: int = 0


def _check_divergence(losses: list[float], window: int = 100) -> None:
    if not np.isfinite(losses[-1]):
        raise TrainingError(f"non-finite loss at step {len(losses) - 1}")
    if len(losses) > window and all(l > 10 * losses[0] for l in losses[-window:]):
        raise TrainingError(f"loss above 10x its initial value for {window} steps (step {len(losses) - 1})")


def train_dsm(
    model: Mlp,
    target: GmmFamily | GmmDistribution,
    sched: NoiseSchedule,
    hyper: DsmHyper = DsmHyper(),
    view_sampler=None,
) -> TrainReport:
    """Denoising score matching: regress eps from sqrt(ab) x0 + sqrt(1 - ab) eps.

    For a family, conditions are drawn uniformly and dropped to the
    unconditional slot with probability ``uncond_prob``. ``view_sampler(rng, n)``
    optionally supplies (n, 6) view coefficients so the model learns to ignore them.
    """
    family = target if isinstance(target, GmmFamily) else GmmFamily((target,))
    if model.layout.x_dim != family.dimension:
        raise ConfigError("model and data dimensions differ")
    start = _time.perf_counter()
    opt = Adam(model.params(), lr=hyper.lr)
    losses: list[float] = []
    n_cond = model.layout.n_conditions
    for step in range(hyper.steps):
        rng = _rng.stream(hyper.seed, 21, step)
        n = hyper.batch_size
        # one condition per batch keeps the one-hot encoding scalar
        y: Condition = None
        if n_cond > 0 and rng.uniform() >= hyper.uncond_prob:
            y = int(rng.integers(len(family))) if len(family) > 1 else 0
        x0 = family.condition(y).sample(n, rng)
        t = rng.uniform(*hyper.t_range, size=n)
        eps = rng.standard_normal(x0.shape)
        a = sched.alpha_bar(t)[:, None]
        xt = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
        view = view_sampler(rng, n) if view_sampler is not None else None
        loss, grads = mlp_grad(model, None, MlpBatch(xt, t, eps, y, view), "base")
        losses.append(loss)
        _check_divergence(losses)
        opt.step(grads)
    return TrainReport(losses, model.fingerprint(), _time.perf_counter() - start)


def optimal_eps(p: GmmDistribution, sched: NoiseSchedule, x, t) -> np.ndarray:
    """E[eps | x_t] for GMM data, from the exact noisy score."""
    return eps_from_score(p.noisy_score(sched, x, t), sched, t)


def mse_to_optimal(
    model: Mlp,
    p: GmmDistribution,
    sched: NoiseSchedule,
    y: Condition = None,
    t_range=(0.1, 0.9),
    x_max: float = 3.0,
    n_t: int = 17,
    n_x: int = 41,
) -> float:
    """Mean squared distance to the optimal denoiser on a held-out (x, t) grid."""
    axis = np.linspace(-x_max, x_max, n_x)
    grids = np.meshgrid(*([axis] * p.dimension), indexing="ij")
    xs = np.stack([g.ravel() for g in grids], axis=1)
    total = 0.0
    ts = np.linspace(*t_range, n_t)
    for t in ts:
        diff = mlp_forward(model, None, xs, t, y) - optimal_eps(p, sched, xs, t)
        total += float(np.mean(np.sum(diff * diff, axis=1)))
    return total / len(ts)


@dataclass(frozen=True)
class BridgeBatch:
    """Bridge regression data: endpoints plus (optionally) a pre-drawn state.

    When ``x_t`` is given, ``z`` must be the standard-normal draw that produced
    it and ``t`` its bridge time.
    """

    x0_pred: np.ndarray
    x_rndr: np.ndarray
    y: Condition = None
    view: object = None
    x_t: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None


@dataclass(frozen=True)
class BridgeHyper:
    steps: int = 5000
    lr: float = 1e-3
    t_range: tuple[float, float] = (0.02, 0.5)
    seed: int = 0


def bridge_score_step(
    base: Mlp,
    adapter: AdapterParams,
    batch: BridgeBatch,
    sched: NoiseSchedule,
    opt: Adam,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """One adapter update on ||eps_phi(x_t, t, y, c) - z||^2; base weights stay untouched."""
    x_t, z, t = batch.x_t, batch.z, batch.t
    if x_t is None:
        n = np.atleast_2d(batch.x_rndr).shape[0]
        t = rng.uniform(*BridgeHyper.t_range, size=n) if t is None else t
        x_t, z = posterior_sample(
            BridgeEndpoints(np.atleast_2d(batch.x0_pred), np.atleast_2d(batch.x_rndr)), sched, t, rng
        )
    loss, grads = mlp_grad(base, adapter, MlpBatch(x_t, t, z, batch.y, batch.view), "adapter")
    opt.step(grads)
    return loss


def train_bridge_score(
    base: Mlp,
    adapter: AdapterParams,
    endpoints_stream: Iterable[BridgeBatch],
    sched: NoiseSchedule,
    hyper: BridgeHyper = BridgeHyper(),
    opt: Optional[Adam] = None,
) -> TrainReport:
    """Adapter steps over a stream of bridge batches, one step per batch."""
    start = _time.perf_counter()
    opt = opt or Adam(adapter.params(), lr=hyper.lr)
    losses = []
    for step, batch in enumerate(endpoints_stream):
        if step >= hyper.steps:
            break
        rng = _rng.stream(hyper.seed, 31, step)
        if batch.x_t is None and batch.t is None:
            n = np.atleast_2d(batch.x_rndr).shape[0]
            batch = BridgeBatch(batch.x0_pred, batch.x_rndr, batch.y, batch.view, t=rng.uniform(*hyper.t_range, size=n))
        losses.append(bridge_score_step(base, adapter, batch, sched, opt, rng))
        _check_divergence(losses)
    return TrainReport(losses, adapter.fingerprint(), _time.perf_counter() - start)


@dataclass(frozen=True)
class MlpScore:
    """ScoreModel view of a (possibly adapted) network.

    With ``projection`` (orthonormal rows, (k, D)) the network works on the
    k-dimensional embedding of D-dimensional inputs and its output is lifted
    back with the transpose.
    """

    model: Mlp
    adapter: Optional[AdapterParams] = None
    projection: Optional[np.ndarray] = None

    @property
    def dimension(self) -> int:
        return self.model.layout.x_dim if self.projection is None else self.projection.shape[1]

    def embed(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x if self.projection is None else x @ self.projection.T

    def epsilon(self, x, t, y: Condition = None, view=None) -> np.ndarray:
        out = mlp_forward(self.model, self.adapter, self.embed(x), t, y, view)
        return out if self.projection is None else out @ self.projection


# Snapshot format: <stem>.json manifest + <stem>.bin holding the tensors as
# little-endian float64, concatenated in manifest order.
SNAPSHOT_VERSION = 1


def save_snapshot(path, model: Mlp, adapter: Optional[AdapterParams] = None, extra: Optional[dict] = None) -> None:
    path = Path(path)
    tensors = list(model.params().items())
    manifest = {
        "format": "tracelab-snapshot",
        "version": SNAPSHOT_VERSION,
        "widths": model.widths,
        "activation": model.activation,
        "layout": {"x_dim": model.layout.x_dim, "n_conditions": model.layout.n_conditions},
        "adapter": None,
        "tensors": [],
    }
    if adapter is not None:
        manifest["adapter"] = {"rank": adapter.rank, "scale": adapter.scale, "layers": list(adapter.layers)}
        tensors += list(adapter.params().items())
    if extra:
        manifest["extra"] = extra
    offset = 0
    blobs = []
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(data)
        blobs.append(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    _sibling(path, ".bin").write_bytes(b"".join(blobs))
    _sibling(path, ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sibling(path: Path, suffix: str) -> Path:
    # accepts a bare stem or either file of the pair; dots inside the stem are kept
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + suffix)


def load_snapshot(path) -> tuple[Mlp, Optional[AdapterParams]]:
    path = Path(path)
    manifest = json.loads(_sibling(path, ".json").read_text())
    if manifest.get("format") != "tracelab-snapshot":
        raise ConfigError(f"{path} is not a snapshot manifest")
    raw = _sibling(path, ".bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(float)
    layout = InputLayout(**manifest["layout"])
    n_layers = len(manifest["widths"]) - 1
    model = Mlp(
        layout,
        manifest["widths"],
        [tensors[f"W{i}"] for i in range(n_layers)],
        [tensors[f"b{i}"] for i in range(n_layers)],
        manifest["activation"],
    )
    adapter = None
    if manifest["adapter"] is not None:
        a = manifest["adapter"]
        layers = tuple(a["layers"])
        adapter = AdapterParams(layers, [tensors[f"A{l}"] for l in layers], [tensors[f"B{l}"] for l in layers], a["rank"], a["scale"])
    return model, adapter
