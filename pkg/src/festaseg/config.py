"""JSON run configuration with strict key checking and materialized defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .crf import CrfParams
from .errors import ValidationError
from .experiment import DEFAULT_METHODS, ExperimentConfig, Method
from .festa import FestaConfig
from .model import ModelConfig
from .synth import SceneSpec, ScribblePolicy
from .trainer import TrainConfig


@dataclass
class ExperimentOptions:
    preset: str = "line"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    methods: list[dict] = field(default_factory=lambda: [dataclasses.asdict(m) for m in DEFAULT_METHODS])
    crf_candidates: list[list[float]] = field(default_factory=lambda: [[1.0, 1.0], [1.0, 0.1], [1.0, 0.0]])


SECTIONS = {
    "scene": SceneSpec,
    "scribble": ScribblePolicy,
    "model": ModelConfig,
    "festa": FestaConfig,
    "crf": CrfParams,
    "train": TrainConfig,
    "experiment": ExperimentOptions,
}


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    scribble: ScribblePolicy = field(default_factory=ScribblePolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    festa: FestaConfig = field(default_factory=FestaConfig)
    crf: CrfParams = field(default_factory=CrfParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentOptions = field(default_factory=ExperimentOptions)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["paths"] = dict(self.paths)
        return out

    def experiment_config(self) -> ExperimentConfig:
        opts = self.experiment
        return ExperimentConfig(
            preset=opts.preset, seeds=[int(s) for s in opts.seeds], scene=self.scene, model=self.model,
            festa=self.festa, train=self.train, crf=self.crf,
            crf_candidates=[tuple(float(w) for w in c) for c in opts.crf_candidates],
            methods=[_build(Method, m, "experiment.methods") for m in opts.methods])


def experiment_defaults() -> RunConfig:
    """Defaults for the ``experiment`` command: desk-scale training budget."""
    return RunConfig(train=ExperimentConfig().train)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ValidationError(f"config section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValidationError(f"bad value in {section!r}: {exc}") from None


def _merge(name: str, current: dict, updates: dict) -> dict:
    merged = {**current, **updates}
    # objects_per_class defaults per level; a new level without an explicit count takes its own default
    if name == "scribble" and "level" in updates and "objects_per_class" not in updates:
        merged["objects_per_class"] = None
    return merged


def run_config_from_dict(raw: dict | None, base: RunConfig | None = None) -> RunConfig:
    """Parse a config document; sections and keys it omits come from ``base``."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS) - {"paths"})
    if unknown:
        raise ValidationError(f"unknown config section(s): {', '.join(unknown)}")
    base = base or RunConfig()
    kwargs = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ValidationError(f"config section {name!r} must be an object")
        merged = dataclasses.asdict(getattr(base, name))
        unknown = sorted(set(section) - set(merged))
        if unknown:
            raise ValidationError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
        kwargs[name] = _build(cls, _merge(name, merged, section), name)
    paths = raw.get("paths", {})
    if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
        raise ValidationError("'paths' must map names to strings")
    cfg = RunConfig(paths={**base.paths, **paths}, **kwargs)
    if cfg.scene.num_classes != cfg.model.num_classes:
        raise ValidationError(f"scene.num_classes ({cfg.scene.num_classes}) and model.num_classes "
                              f"({cfg.model.num_classes}) differ")
    return cfg


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Replace the non-None ``values`` in one section and re-validate it."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    current = _merge(section, dataclasses.asdict(getattr(cfg, section)), values)
    return dataclasses.replace(cfg, **{section: _build(SECTIONS[section], current, section)})
