"""Run configuration: model shape, priors, loss weights, schedules and training knobs.

A config file is YAML with up to four top-level sections::

    model:     {what_dim: 64, num_clusters: 10, ...}
    loss:      {alpha_recon: 8.0, ...}
    schedules: {pres_prior: {end_step: 20000}, alpha_overlap: {...}}
    train:     {batch_size: 16, lr: 1.0e-4, ...}

Anything omitted takes its default. Every leaf can also be overridden with a
dotted ``section.key=value`` string (see :func:`apply_overrides`).
"""
from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigError, ConfigValidationError


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 128
    image_width: int = 128
    grid_h: int = 16
    grid_w: int = 16
    what_dim: int = 256
    num_clusters: int = 10
    glimpse_h: int = 32
    glimpse_w: int = 32
    anchor_h: float = 72.0
    anchor_w: float = 72.0
    mc_samples: int = 1
    gumbel_temperature: float = 1.0
    # "resnet18" follows the reference backbone; "small" is a light conv stack
    # for tests and CPU smoke runs.
    backbone: str = "resnet18"
    feature_channels: int = 64
    head_channels: int = 128
    pixel_std: float = 0.15
    where_scale_clamp: float = 1.5
    log_sigma_clamp: float = 5.0
    mixture_init_std: float = 0.5
    sample_where_for_glimpse: bool = False
    hard_cat_in_what_prior: bool = False
    where_prior_mean: float = 0.0
    where_prior_std: float = 1.0
    depth_prior_mean: float = 0.0
    depth_prior_std: float = 1.0
    refine_alpha_threshold: float = 0.1

    @property
    def num_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def cell_h(self) -> float:
        return self.image_height / self.grid_h

    @property
    def cell_w(self) -> float:
        return self.image_width / self.grid_w

    def validate(self):
        for name in ("image_height", "image_width", "grid_h", "grid_w",
                     "glimpse_h", "glimpse_w", "feature_channels", "head_channels"):
            if getattr(self, name) < 1:
                raise ConfigValidationError(f"model.{name} must be positive")
        for name in ("anchor_h", "anchor_w", "gumbel_temperature", "pixel_std",
                     "where_prior_std", "depth_prior_std", "log_sigma_clamp"):
            if not getattr(self, name) > 0:
                raise ConfigValidationError(f"model.{name} must be positive")
        if self.what_dim < 1:
            raise ConfigValidationError("model.what_dim must be >= 1")
        if self.num_clusters < 2:
            raise ConfigValidationError("model.num_clusters must be >= 2")
        if self.mc_samples < 1:
            raise ConfigValidationError("model.mc_samples must be >= 1")
        if self.backbone not in ("resnet18", "small"):
            raise ConfigValidationError("model.backbone must be 'resnet18' or 'small'")
        if self.image_height % self.grid_h or self.image_width % self.grid_w:
            raise ConfigValidationError("grid cells must tile the image exactly")
        if not 0.0 <= self.refine_alpha_threshold < 1.0:
            raise ConfigValidationError("model.refine_alpha_threshold must lie in [0, 1)")


@dataclass(frozen=True)
class LossWeights:
    alpha_recon: float = 8.0
    alpha_overlap: float = 2.0
    alpha_pres: float = 1.0
    alpha_where: float = 1.0
    alpha_depth: float = 1.0
    alpha_cat: float = 1.0
    alpha_what: float = 1.0

    def validate(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigValidationError(f"loss.{f.name} must be a finite value >= 0")


@dataclass(frozen=True)
class Schedule:
    name: str
    start_value: float
    end_value: float
    start_step: int = 0
    end_step: int = 1000
    interpolation: str = "linear"

    def validate(self):
        if self.interpolation not in ("linear", "exponential"):
            raise ConfigValidationError(
                f"schedules.{self.name}.interpolation must be 'linear' or 'exponential'")
        if self.start_step < 0 or self.end_step < self.start_step:
            raise ConfigValidationError(
                f"schedules.{self.name} needs 0 <= start_step <= end_step")
        if self.interpolation == "exponential" and not (
                self.start_value > 0 and self.end_value > 0):
            raise ConfigValidationError(
                f"schedules.{self.name}: exponential interpolation needs positive endpoints")


def default_schedules() -> dict[str, Schedule]:
    return {
        "pres_prior": Schedule("pres_prior", 1.0, 6e-6, 0, 10000, "exponential"),
        "alpha_overlap": Schedule("alpha_overlap", 2.0, 0.0, 0, 1000, "linear"),
    }


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    num_steps: int = 10000
    log_every: int = 100
    ckpt_every: int = 5000
    eval_every: int = 10000
    grad_clip: float = 1.0
    seed: int = 0
    lr_mult_prior: float = 1.0
    lr_mult_encoder: float = 1.0
    lr_mult_decoder: float = 1.0
    device: str = "cpu"
    num_threads: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ConfigValidationError("train.batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigValidationError("train.lr must be positive")
        for name in ("num_steps", "seed", "num_threads"):
            if getattr(self, name) < 0:
                raise ConfigValidationError(f"train.{name} must be >= 0")
        for name in ("log_every", "ckpt_every", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigValidationError(f"train.{name} must be >= 1")
        for name in ("lr_mult_prior", "lr_mult_encoder", "lr_mult_decoder", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigValidationError(f"train.{name} must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedules: dict = field(default_factory=default_schedules)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        for s in self.schedules.values():
            s.validate()
        return self

    def schedule(self, name: str) -> Schedule | None:
        return self.schedules.get(name)

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "loss": dataclasses.asdict(self.loss),
            "schedules": {k: {f.name: getattr(s, f.name)
                              for f in dataclasses.fields(s) if f.name != "name"}
                          for k, s in self.schedules.items()},
            "train": dataclasses.asdict(self.train),
        }

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(data) - {"model", "loss", "schedules", "train"}
        if unknown:
            raise ConfigError(f"unknown config section: {sorted(unknown)[0]}")
        model = _build(ModelConfig, data.get("model"), "model")
        loss = _build(LossWeights, data.get("loss"), "loss")
        train = _build(TrainConfig, data.get("train"), "train")

        schedules = default_schedules()
        raw = data.get("schedules") or {}
        if not isinstance(raw, dict):
            raise ConfigError("schedules must be a mapping")
        for name, body in raw.items():
            if body is None:
                schedules.pop(name, None)
                continue
            base = schedules.get(name)
            base_fields = {} if base is None else {
                f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
            base_fields.update(body if isinstance(body, dict) else _not_mapping(f"schedules.{name}"))
            base_fields["name"] = name
            schedules[name] = _build(Schedule, base_fields, f"schedules.{name}")
        return cls(model=model, loss=loss, schedules=schedules, train=train).validate()


def _not_mapping(key):
    raise ConfigError(f"{key} must be a mapping")


def _coerce(value, annotation, key):
    tp = annotation
    if isinstance(tp, str):
        tp = {"int": int, "float": float, "str": str, "bool": bool}.get(tp, tp)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
                return value.lower() in ("true", "1")
            raise ValueError(value)
        if tp is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if tp is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if tp is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {key}: {value!r}") from None
    return value


def _build(cls, data, section):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a mapping")
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"unknown config key: {section}.{key}")
        kwargs[key] = _coerce(value, hints[key], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML config file, apply ``key=value`` overrides and validate.

    ``path=None`` yields the defaults. Parse problems raise
    :class:`ConfigError`; invariant violations raise
    :class:`ConfigValidationError`.
    """
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from None
    if overrides:
        data = apply_overrides(data, overrides)
    return RunConfig.from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Merge dotted ``section.key=value`` strings into a raw config mapping."""
    data = _deepcopy(data or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key needs a section prefix: {key}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping key: {key}")
        node[parts[-1]] = value
    return data


def _deepcopy(d):
    return {k: _deepcopy(v) if isinstance(v, dict) else v for k, v in d.items()}


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def schedule_value(s: Schedule, step: int) -> float:
    """Value of a schedule at ``step``; flat outside ``[start_step, end_step]``."""
    if step <= s.start_step:
        return s.start_value
    if step >= s.end_step:
        return s.end_value
    t = (step - s.start_step) / (s.end_step - s.start_step)
    if s.interpolation == "exponential":
        return math.exp((1 - t) * math.log(s.start_value) + t * math.log(s.end_value))
    return s.start_value + t * (s.end_value - s.start_value)
