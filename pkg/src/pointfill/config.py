"""TOML run configuration with dotted ``section.key=value`` overrides.

Sections mirror the library dataclasses::

    seed = 0
    [model]      # ModelConfig fields
    [train]      # TrainConfig scalars
    [objective]  # kind, alpha, k, temperature
    [augment]    # max_crop_fraction, max_angle, max_shift
    [pipeline]   # PipelineConfig scalars
    [phantom]    # PhantomSpec fields plus ``count``
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cloud import AugmentConfig
from .model.config import ModelConfig
from .model.train import TrainConfig
from .objective import ObjectiveConfig
from .pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    kind: str = "sphere_shell"
    grid: int = 64
    thickness: int = 3
    defect_fraction: float = 0.15
    radius_fraction: float = 0.375
    count: int = 8
    base_seed: int = 0


_TRAIN_SCALARS = ("steps", "batch_size", "lr", "min_lr_ratio", "warmup", "grad_clip", "checkpoint_every")
_PIPELINE_SCALARS = (
    "refinements", "jitter_sigma", "group_in", "group_out", "closing_kind",
    "closing_radius", "connectivity", "mesh", "track_memory",
)


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, objective=self.objective, augment=self.augment, **self.train)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(seed=self.seed, objective=self.objective, **self.pipeline)

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "objective": asdict(self.objective),
            "augment": asdict(self.augment),
            "train": {k: getattr(self.train_config(), k) for k in _TRAIN_SCALARS},
            "pipeline": {
                k: v for k in _PIPELINE_SCALARS if (v := getattr(self.pipeline_config(), k)) is not None
            },
            "phantom": asdict(self.phantom),
        }
        return out

    def dump(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _section(name: str, raw: dict, allowed) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return dict(raw)


def from_dict(raw: dict) -> RunConfig:
    known = {"seed", "model", "objective", "augment", "train", "pipeline", "phantom"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        return RunConfig(
            seed=int(raw.get("seed", 0)),
            model=ModelConfig(**_section("model", raw.get("model", {}), [f.name for f in fields(ModelConfig)])),
            objective=ObjectiveConfig(
                **_section("objective", raw.get("objective", {}), [f.name for f in fields(ObjectiveConfig)])
            ),
            augment=AugmentConfig(
                **_section("augment", raw.get("augment", {}), [f.name for f in fields(AugmentConfig)])
            ),
            train=_checked(TrainConfig, _section("train", raw.get("train", {}), _TRAIN_SCALARS)),
            pipeline=_checked(PipelineConfig, _section("pipeline", raw.get("pipeline", {}), _PIPELINE_SCALARS)),
            phantom=PhantomConfig(
                **_section("phantom", raw.get("phantom", {}), [f.name for f in fields(PhantomConfig)])
            ),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _checked(cls, values: dict) -> dict:
    cls(**values)  # validate eagerly
    return values


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key.strip().split("."), parsed


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        keys, value = parse_override(item)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[keys[-1]] = value
    return from_dict(raw)
