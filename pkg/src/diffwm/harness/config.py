"""Experiment configuration: JSON in, validated dataclasses out.

Every section is optional and falls back to the defaults below; unknown
keys anywhere are rejected so a typo never silently becomes a default.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..attack import AttackConfig, AttackError
from ..codec import Codec, RenderMap, grid_side
from ..prior import ContentPrior, make_prior
from ..schedule import NoiseSchedule, make_schedule
from ..watermark import WatermarkKey, make_key

U64 = (1 << 64) - 1
RHO_PER_SQRT_BIT = 2.5


class ConfigError(ValueError):
    pass


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _need(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    s: float = 0.008

    def validate(self, path: str):
        _need(self.kind in ("linear", "cosine"), f"{path}.kind", f"must be 'linear' or 'cosine', got {self.kind!r}")
        _need(_is_int(self.T) and self.T >= 1, f"{path}.T", f"must be an integer >= 1, got {self.T!r}")
        for name in ("beta_start", "beta_end"):
            v = getattr(self, name)
            _need(_is_num(v) and 0 < v < 1, f"{path}.{name}", f"must lie in (0, 1), got {v!r}")
        _need(self.beta_start <= self.beta_end, f"{path}", "beta_start must not exceed beta_end")
        _need(_is_num(self.s) and self.s > 0, f"{path}.s", f"must be positive, got {self.s!r}")

    def build(self) -> NoiseSchedule:
        return make_schedule(self.kind, self.T, self.beta_start, self.beta_end, self.s)


@dataclass(frozen=True)
class PriorSpec:
    d: int = 64
    K: int = 4
    sigma: float = 1.0
    mean_separation: float = 8.0
    seed: int = 1

    def validate(self, path: str):
        _need(_is_int(self.d) and self.d >= 1, f"{path}.d", f"must be an integer >= 1, got {self.d!r}")
        _need(_is_int(self.K) and self.K >= 1, f"{path}.K", f"must be an integer >= 1, got {self.K!r}")
        _need(_is_num(self.sigma) and self.sigma > 0, f"{path}.sigma", f"must be positive, got {self.sigma!r}")
        _need(_is_num(self.mean_separation) and self.mean_separation >= 0, f"{path}.mean_separation",
              f"must be >= 0, got {self.mean_separation!r}")
        _need(_is_int(self.seed) and 0 <= self.seed <= U64, f"{path}.seed", "must be a 64-bit unsigned integer")

    def build(self) -> ContentPrior:
        return make_prior(self.d, self.K, self.sigma, self.mean_separation, self.seed)


@dataclass(frozen=True)
class WatermarkSpec:
    B: int = 32
    rho: float | None = None
    kappa: float | None = None
    seed: int = 2

    def validate(self, path: str):
        _need(_is_int(self.B) and self.B >= 1, f"{path}.B", f"must be an integer >= 1, got {self.B!r}")
        for name in ("rho", "kappa"):
            v = getattr(self, name)
            _need(v is None or (_is_num(v) and v > 0), f"{path}.{name}", f"must be positive or null, got {v!r}")
        _need(_is_int(self.seed) and 0 <= self.seed <= U64, f"{path}.seed", "must be a 64-bit unsigned integer")

    def resolved_rho(self) -> float:
        """``rho`` if set, else ``2.5 * sqrt(B)`` (per-bit amplitude 2.5)."""
        return float(self.rho) if self.rho is not None else RHO_PER_SQRT_BIT * math.sqrt(self.B)


@dataclass(frozen=True)
class CodecSpec:
    seed: int = 3

    def validate(self, path: str):
        _need(_is_int(self.seed) and 0 <= self.seed <= U64, f"{path}.seed", "must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class MISpec:
    bins: int = 8

    def validate(self, path: str):
        _need(_is_int(self.bins) and self.bins >= 2, f"{path}.bins", f"must be an integer >= 2, got {self.bins!r}")


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    name: str = "sweep"

    def validate(self, path: str):
        _need(isinstance(self.dir, str) and self.dir != "", f"{path}.dir", "must be a non-empty string")
        _need(isinstance(self.name, str) and self.name != "" and "/" not in self.name, f"{path}.name",
              "must be a plain file stem")


SWEEP_KEYS = {
    "mode": ("attack", "mode"),
    "t_start": ("attack", "t_start"),
    "gamma": ("attack", "gamma"),
    "lam": ("attack", "lam"),
    "prompt_weight": ("attack", "prompt_weight"),
    "guided_steps": ("attack", "guided_steps"),
    "noise_sigma": ("attack", "noise_sigma"),
    "blur_kernel": ("attack", "blur_kernel"),
    "blur_sigma": ("attack", "blur_sigma"),
    "crop_frac": ("attack", "crop_frac"),
    "rho": ("watermark", "rho"),
    "B": ("watermark", "B"),
    "kappa": ("watermark", "kappa"),
    "K": ("prior", "K"),
    "sigma": ("prior", "sigma"),
    "mean_separation": ("prior", "mean_separation"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    attack_schedule: ScheduleSpec | None = None
    prior: PriorSpec = field(default_factory=PriorSpec)
    watermark: WatermarkSpec = field(default_factory=WatermarkSpec)
    codec: CodecSpec = field(default_factory=CodecSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mi: MISpec = field(default_factory=MISpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    sweep: dict = field(default_factory=dict)
    trials: int = 100
    master_seed: int = 0

    def validate(self):
        self.schedule.validate("schedule")
        if self.attack_schedule is not None:
            self.attack_schedule.validate("attack_schedule")
        self.prior.validate("prior")
        self.watermark.validate("watermark")
        self.codec.validate("codec")
        self.mi.validate("mi")
        self.output.validate("output")
        _need(_is_int(self.trials) and self.trials >= 1, "trials", f"must be an integer >= 1, got {self.trials!r}")
        _need(_is_int(self.master_seed) and 0 <= self.master_seed <= U64, "master_seed",
              "must be a 64-bit unsigned integer")
        _need(self.watermark.B <= self.prior.d, "watermark.B",
              f"B={self.watermark.B} exceeds d={self.prior.d}; need B <= d for orthonormal carriers")
        T_att = self.effective_attack_schedule().T
        t = self.attack.t_start
        _need(t is None or t <= T_att, "attack.t_start", f"{t} exceeds attack schedule length {T_att}")
        if self.attack.mode in ("blur", "crop_resize"):
            _need(grid_side(self.prior.d) is not None, "attack.mode",
                  f"{self.attack.mode} needs d to be a perfect square, got d={self.prior.d}")
        _need(isinstance(self.sweep, dict), "sweep", "must be an object mapping parameter -> list")
        for k, vals in self.sweep.items():
            _need(k in SWEEP_KEYS, f"sweep.{k}", f"unknown sweep parameter; allowed: {sorted(SWEEP_KEYS)}")
            _need(isinstance(vals, list) and len(vals) > 0, f"sweep.{k}", "must be a non-empty list")
        return self

    def effective_attack_schedule(self) -> ScheduleSpec:
        return self.attack_schedule if self.attack_schedule is not None else self.schedule

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def with_overrides(self, point: dict) -> "ExperimentConfig":
        """Copy with sweep parameters substituted (validated)."""
        data = self.to_dict()
        for k, v in point.items():
            if k not in SWEEP_KEYS:
                raise ConfigError(f"sweep.{k}: unknown sweep parameter")
            sec, name = SWEEP_KEYS[k]
            data[sec][name] = v
        data["sweep"] = {}
        return from_dict(data)


_SECTIONS = {
    "schedule": ScheduleSpec,
    "attack_schedule": ScheduleSpec,
    "prior": PriorSpec,
    "watermark": WatermarkSpec,
    "codec": CodecSpec,
    "attack": AttackConfig,
    "mi": MISpec,
    "output": OutputSpec,
}


def _section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    try:
        return cls(**data)
    except AttackError as e:
        raise ConfigError(f"{path}: {e}") from None
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(allowed)}")
    kw = {}
    for k, v in data.items():
        if k in _SECTIONS:
            kw[k] = None if (k == "attack_schedule" and v is None) else _section(_SECTIONS[k], v, k)
        else:
            kw[k] = v
    return ExperimentConfig(**kw).validate()


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON: {e}") from None
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


@dataclass(frozen=True, eq=False)
class Setup:
    """Concrete objects built from a config, shared by every trial."""

    cfg: ExperimentConfig
    sched: NoiseSchedule
    attack_sched: NoiseSchedule
    prior: ContentPrior
    codec: Codec
    key: WatermarkKey
    rmap: RenderMap | None


def build(cfg: ExperimentConfig) -> Setup:
    sched = cfg.schedule.build()
    attack_sched = cfg.effective_attack_schedule().build()
    prior = cfg.prior.build()
    codec = Codec.from_seed(cfg.codec.seed, cfg.prior.d)
    rho = cfg.watermark.resolved_rho()
    key = make_key(cfg.watermark.seed, cfg.prior.d, cfg.watermark.B, rho, prior.global_mean,
                   cfg.watermark.kappa)
    rmap = RenderMap.for_prior(prior, codec, rho) if grid_side(cfg.prior.d) else None
    return Setup(cfg, sched, attack_sched, prior, codec, key, rmap)
