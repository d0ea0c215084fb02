"""Declarative run configuration.

A run is described by one YAML document. Parsing is strict: unknown keys,
wrong types and out-of-range values are rejected before anything is computed.
``dump_config(load_config(text))`` is a fixed point.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Optional, get_args, get_origin, get_type_hints

import numpy as np
import yaml

from tracelab import _rng
from tracelab.distill import DistillConfig, config_hash
from tracelab.errors import ConfigError
from tracelab.nn import InputLayout
from tracelab.render import DirectField, Splat2D, ViewRanges, random_splats
from tracelab.schedule import NoiseSchedule
from tracelab.score import (
    AnalyticScore,
    GmmDistribution,
    GmmFamily,
    ProjectedScore,
    default_family,
    random_orthonormal,
)

_INIT_TAG = 5
_PROJECTION_TAG = 6


@dataclass(frozen=True)
class ScheduleConfig:
    kind: Literal["linear", "cosine"] = "linear"
    beta_min: float = 0.1
    beta_max: float = 20.0

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.kind, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class ComponentConfig:
    weight: float
    mean: tuple[float, ...]
    var: float


@dataclass(frozen=True)
class FamilyConfig:
    """``toy`` is the ring / bimodal pair; ``gaussian`` a single N(mean, var I); ``custom`` lists members."""

    kind: Literal["toy", "gaussian", "custom"] = "toy"
    mean: tuple[float, ...] = (0.0, 0.0)
    var: float = 1.0
    members: tuple[tuple[ComponentConfig, ...], ...] = ()

    def build(self) -> GmmFamily:
        if self.kind == "toy":
            return default_family()
        if self.kind == "gaussian":
            return GmmFamily((GmmDistribution(np.ones(1), np.asarray([self.mean]), self.var),))
        if not self.members:
            raise ConfigError("custom family needs at least one member")
        return GmmFamily(tuple(
            GmmDistribution.from_components([(c.weight, c.mean, c.var) for c in m]) for m in self.members
        ))


@dataclass(frozen=True)
class GeneratorConfig:
    kind: Literal["direct", "splat"] = "direct"
    height: int = 1
    width: int = 2
    channels: int = 1
    n_splats: int = 10

    def build(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError("canvas dimensions must be positive")
        if self.kind == "direct":
            return DirectField(self.height, self.width, self.channels)
        if self.n_splats < 1:
            raise ConfigError("n_splats must be positive")
        return Splat2D(self.height, self.width, self.channels, self.n_splats)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: Literal["silu", "tanh"] = "silu"
    adapter_rank: int = 4
    adapter_scale: float = 1.0


@dataclass(frozen=True)
class DsmConfig:
    steps: int = 20000
    batch: int = 128
    lr: float = 1e-3
    t_range: tuple[float, float] = (0.02, 1.0)
    uncond_prob: float = 0.2


@dataclass(frozen=True)
class InitConfig:
    """Initial parameters: ``n_particles`` independent draws (direct: N(0, std^2); splat: random scene)."""

    n_particles: int = 64
    std: float = 1.0


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple[str, ...] = ("sds", "trace")
    cfg_weights: tuple[float, ...] = (5.0, 7.5, 10.0, 15.0, 20.0, 25.0, 50.0, 100.0)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class DistillSection:
    """Serializable mirror of :class:`DistillConfig` (seed comes from the run)."""

    cfg_weight: float = 20.0
    weight_fn: Literal["constant", "sigma"] = "sigma"
    t_range: tuple[float, float] = (0.02, 0.5)
    t_mode: Literal["uniform", "annealed"] = "annealed"
    t_prime_range: tuple[float, float] = (0.02, 0.7)
    t_prime_late_hi: float = 0.5
    total_iterations: int = 1700
    stage_boundary: int = 700
    eta_theta: float = 1e-3
    eta_phi: float = 1e-3
    views_per_step: int = 1
    condition: Optional[int] = 1
    renoise: bool = False
    view_scale: tuple[float, float] = (1.0, 1.0)
    view_rotation: tuple[float, float] = (0.0, 0.0)
    view_translation: tuple[float, float] = (0.0, 0.0)
    eval_every: int = 100
    n_eval_views: int = 1
    n_prior_samples: int = 2000

    def build(self, seed: int) -> DistillConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if not f.name.startswith("view_")}
        ranges = ViewRanges(self.view_scale, self.view_rotation, self.view_translation)
        return DistillConfig(rng_seed=seed, view_ranges=ranges, **kw)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. The defaults are the shipped 2D toy scene."""

    seed: int = 0
    out: str = "runs/toy"
    schedule: ScheduleConfig = ScheduleConfig()
    bridge_schedule: ScheduleConfig = ScheduleConfig()
    family: FamilyConfig = FamilyConfig()
    # 0 puts the prior directly on the canvas; k > 0 on k random orthonormal directions
    projection_dim: int = 0
    # variance of the Gaussian prior on the projection's complement; null leaves it unconstrained
    complement_var: Optional[float] = None
    generator: GeneratorConfig = GeneratorConfig()
    model: ModelConfig = ModelConfig()
    dsm: DsmConfig = DsmConfig()
    init: InitConfig = InitConfig()
    distill: DistillSection = DistillSection()
    sweep: SweepConfig = SweepConfig()

    def __post_init__(self):
        validate(self)

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    # builders ---------------------------------------------------------------

    def canvas_dim(self) -> int:
        g = self.generator
        return g.height * g.width * g.channels

    def build_family(self) -> GmmFamily:
        return self.family.build()

    def build_prior(self):
        fam = self.build_family()
        inner = AnalyticScore(fam, self.schedule.build())
        if self.projection_dim == 0:
            return inner
        proj = random_orthonormal(self.projection_dim, self.canvas_dim(), _rng.stream(self.seed, _PROJECTION_TAG))
        return ProjectedScore(inner, proj, self.complement_var)

    def layout(self) -> InputLayout:
        fam = self.build_family()
        return InputLayout(fam.dimension, len(fam))

    def theta0(self, seed: Optional[int] = None) -> np.ndarray:
        seed = self.seed if seed is None else seed
        gen = self.generator.build()
        rng = _rng.stream(seed, _INIT_TAG)
        n = self.init.n_particles
        if isinstance(gen, Splat2D):
            return np.stack([random_splats(gen, rng) for _ in range(n)])
        return self.init.std * rng.standard_normal((n,) + tuple(gen.param_shape))


def validate(cfg: RunConfig) -> None:
    """Cross-module consistency; raises ConfigError on the first problem found."""
    dim = cfg.canvas_dim()
    fam = cfg.family.build()
    if cfg.projection_dim < 0:
        raise ConfigError("projection_dim must be >= 0")
    expected = cfg.projection_dim or dim
    if fam.dimension != expected:
        raise ConfigError(
            f"family dimension {fam.dimension} does not match "
            + (f"projection_dim {cfg.projection_dim}" if cfg.projection_dim else f"canvas size {dim}")
        )
    if cfg.projection_dim > dim:
        raise ConfigError("projection_dim exceeds canvas size")
    if cfg.complement_var is not None and (cfg.projection_dim == 0 or not cfg.complement_var > 0):
        raise ConfigError("complement_var needs projection_dim > 0 and a positive value")
    if cfg.distill.condition is not None and not 0 <= cfg.distill.condition < len(fam):
        raise ConfigError(f"condition {cfg.distill.condition} outside family of size {len(fam)}")
    if cfg.init.n_particles < 1:
        raise ConfigError("n_particles must be >= 1")
    if not cfg.model.hidden or any(h < 1 for h in cfg.model.hidden):
        raise ConfigError("hidden widths must be positive")
    if not 1 <= cfg.model.adapter_rank < min(cfg.model.hidden):
        raise ConfigError("adapter_rank must satisfy 1 <= r < min hidden width")
    if cfg.dsm.steps < 0 or cfg.dsm.batch < 1 or cfg.dsm.lr <= 0:
        raise ConfigError("invalid dsm settings")
    if not 0.0 < cfg.dsm.t_range[0] < cfg.dsm.t_range[1] <= 1.0:
        raise ConfigError("dsm t_range must satisfy 0 < lo < hi <= 1")
    for name in ("t_range", "t_prime_range"):
        lo, hi = getattr(cfg.distill, name)
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError(f"distill.{name} must satisfy 0 < lo < hi < 1")
    if not cfg.sweep.methods or not cfg.sweep.cfg_weights or not cfg.sweep.seeds:
        raise ConfigError("sweep lists must be non-empty")
    if any(m not in ("sds", "trace") for m in cfg.sweep.methods):
        raise ConfigError(f"unknown sweep method in {cfg.sweep.methods}")
    for s in (cfg.schedule, cfg.bridge_schedule):
        s.build()
    cfg.distill.build(cfg.seed)


# parsing ------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin is Literal:
        if value not in get_args(tp):
            raise ConfigError(f"{where}: {value!r} not one of {get_args(tp)}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is not None and type(None) in get_args(tp):
        if value is None:
            return None
        (inner,) = [a for a in get_args(tp) if a is not type(None)]
        return _coerce(inner, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def from_dict(cls, data: Any, where: str = "config"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return from_dict(RunConfig, data)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def default_config() -> RunConfig:
    return RunConfig()

