"""Structured run configuration for the command-line interface."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .evaluation import PredictorSpec
from .kg import KnowledgeGraph, load_kg
from .models import ModelKind
from .synthetic import generate_synthetic_kg
from .training import TrainConfig


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


_MISSING = object()


def _get(obj: dict, key: str, path: str, types=None, default=_MISSING):
    if key not in obj:
        if default is _MISSING:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return default
    value = obj[key]
    if types is not None:
        if types in (int, float) and isinstance(value, bool):
            raise ConfigError(f"{path}.{key}", f"expected {types.__name__}, got bool")
        if types is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, types):
            type_name = types.__name__ if isinstance(types, type) else str(types)
            raise ConfigError(f"{path}.{key}", f"expected {type_name}, got {type(value).__name__}")
    return value


def _no_extras(obj: dict, allowed: set[str], path: str) -> None:
    extras = set(obj) - allowed
    if extras:
        raise ConfigError(f"{path}.{sorted(extras)[0]}", "unknown field")


@dataclass
class SyntheticSpec:
    entities: int = 200
    relations: int = 10
    dim: int = 64
    train: int = 5000
    valid: int = 1000
    test: int = 2000
    seed: int = 0
    logit_sd: float = 1.0


@dataclass
class DatasetConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    synthetic: SyntheticSpec | None = None


@dataclass
class ModelConfig:
    kind: ModelKind = ModelKind.DISTMULT
    dim: int | None = None
    norm_p: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class EvalConfig:
    epsilon: float = 0.1
    filtered: bool = True
    filter_splits: tuple[str, ...] = ("train", "valid")
    trials: int = 15
    seed: int = 0
    bin_width: int = 100
    max_rank: int = 3000
    calibration_sizes: tuple[int, ...] = (10, 100, 200, 500)
    sweep_epsilons: tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.5)
    calibration_fraction: float = 0.8


@dataclass
class RunConfig:
    dataset: DatasetConfig
    model: ModelConfig
    predictors: list[PredictorSpec]
    eval: EvalConfig
    output_dir: str = "out"

    def build_kg(self) -> KnowledgeGraph:
        if self.dataset.synthetic is not None:
            s = self.dataset.synthetic
            return generate_synthetic_kg(
                n_entities=s.entities,
                n_relations=s.relations,
                dim=s.dim,
                n_train=s.train,
                n_valid=s.valid,
                n_test=s.test,
                seed=s.seed,
                logit_sd=s.logit_sd,
            )
        return load_kg(self.dataset.train, self.dataset.valid, self.dataset.test)


def _parse_dataset(obj: dict, path: str) -> DatasetConfig:
    _no_extras(obj, {"train", "valid", "test", "synthetic"}, path)
    if "synthetic" in obj:
        if any(k in obj for k in ("train", "valid", "test")):
            raise ConfigError(path, "give either file paths or a synthetic block, not both")
        synth = _get(obj, "synthetic", path, dict)
        spath = f"{path}.synthetic"
        _no_extras(
            synth,
            {"entities", "relations", "dim", "train", "valid", "test", "seed", "logit_sd"},
            spath,
        )
        spec = SyntheticSpec(
            entities=_get(synth, "entities", spath, int, 200),
            relations=_get(synth, "relations", spath, int, 10),
            dim=_get(synth, "dim", spath, int, 64),
            train=_get(synth, "train", spath, int, 5000),
            valid=_get(synth, "valid", spath, int, 1000),
            test=_get(synth, "test", spath, int, 2000),
            seed=_get(synth, "seed", spath, int, 0),
            logit_sd=_get(synth, "logit_sd", spath, float, 1.0),
        )
        for name in ("entities", "relations", "dim", "train", "valid", "test"):
            if getattr(spec, name) < 1:
                raise ConfigError(f"{spath}.{name}", "must be >= 1")
        return DatasetConfig(synthetic=spec)
    paths = {}
    for split in ("train", "valid", "test"):
        value = _get(obj, split, path, str)
        if not Path(value).exists():
            raise ConfigError(f"{path}.{split}", f"file not found: {value}")
        paths[split] = value
    return DatasetConfig(**paths)


def _parse_model(obj: dict, path: str) -> ModelConfig:
    _no_extras(obj, {"kind", "dim", "norm_p", "train"}, path)
    kind_name = _get(obj, "kind", path, str, "distmult")
    try:
        kind = ModelKind(kind_name)
    except ValueError:
        raise ConfigError(f"{path}.kind", f"unknown model kind {kind_name!r}") from None
    dim = _get(obj, "dim", path, int, None)
    if dim is not None and dim < 1:
        raise ConfigError(f"{path}.dim", "must be >= 1")
    norm_p = _get(obj, "norm_p", path, int, 1)
    if norm_p not in (1, 2):
        raise ConfigError(f"{path}.norm_p", "must be 1 or 2")
    train_obj = _get(obj, "train", path, dict, {})
    tpath = f"{path}.train"
    allowed = set(TrainConfig().to_dict())
    _no_extras(train_obj, allowed, tpath)
    train = TrainConfig(**{**TrainConfig().to_dict(), **train_obj})
    try:
        train.validate()
    except ValueError as err:
        raise ConfigError(tpath, str(err)) from None
    return ModelConfig(kind=kind, dim=dim, norm_p=norm_p, train=train)


def _parse_predictors(items, path: str) -> list[PredictorSpec]:
    if not isinstance(items, list) or not items:
        raise ConfigError(path, "must be a nonempty list of predictor specs")
    specs = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigError(f"{path}[{i}]", "must be an object")
        try:
            specs.append(PredictorSpec.from_dict(item))
        except ValueError as err:
            raise ConfigError(f"{path}[{i}]", str(err)) from None
    return specs


def _parse_eval(obj: dict, path: str) -> EvalConfig:
    defaults = EvalConfig()
    _no_extras(
        obj,
        {
            "epsilon",
            "filtered",
            "filter_splits",
            "trials",
            "seed",
            "bin_width",
            "max_rank",
            "calibration_sizes",
            "sweep_epsilons",
            "calibration_fraction",
        },
        path,
    )
    epsilon = _get(obj, "epsilon", path, float, defaults.epsilon)
    if not 0.0 < epsilon < 1.0:
        raise ConfigError(f"{path}.epsilon", "must be in (0, 1)")
    splits = tuple(_get(obj, "filter_splits", path, list, list(defaults.filter_splits)))
    for s in splits:
        if s not in ("train", "valid", "test"):
            raise ConfigError(f"{path}.filter_splits", f"unknown split {s!r}")
    config = EvalConfig(
        epsilon=epsilon,
        filtered=_get(obj, "filtered", path, bool, defaults.filtered),
        filter_splits=splits,
        trials=_get(obj, "trials", path, int, defaults.trials),
        seed=_get(obj, "seed", path, int, defaults.seed),
        bin_width=_get(obj, "bin_width", path, int, defaults.bin_width),
        max_rank=_get(obj, "max_rank", path, int, defaults.max_rank),
        calibration_sizes=tuple(
            _get(obj, "calibration_sizes", path, list, list(defaults.calibration_sizes))
        ),
        sweep_epsilons=tuple(
            _get(obj, "sweep_epsilons", path, list, list(defaults.sweep_epsilons))
        ),
        calibration_fraction=_get(
            obj, "calibration_fraction", path, float, defaults.calibration_fraction
        ),
    )
    for name in ("trials", "bin_width", "max_rank"):
        if getattr(config, name) < 1:
            raise ConfigError(f"{path}.{name}", "must be >= 1")
    if not 0.0 < config.calibration_fraction <= 1.0:
        raise ConfigError(f"{path}.calibration_fraction", "must be in (0, 1]")
    for i, eps in enumerate(config.sweep_epsilons):
        if not 0.0 < eps < 1.0:
            raise ConfigError(f"{path}.sweep_epsilons[{i}]", "must be in (0, 1)")
    for i, size in enumerate(config.calibration_sizes):
        if size < 1:
            raise ConfigError(f"{path}.calibration_sizes[{i}]", "must be >= 1")
    return config


def parse_config(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config", "top level must be an object")
    _no_extras(payload, {"dataset", "model", "predictors", "eval", "output_dir"}, "config")
    dataset = _parse_dataset(_get(payload, "dataset", "config", dict), "dataset")
    model = _parse_model(_get(payload, "model", "config", dict, {}), "model")
    predictors = _parse_predictors(_get(payload, "predictors", "config", list), "predictors")
    eval_cfg = _parse_eval(_get(payload, "eval", "config", dict, {}), "eval")
    output_dir = _get(payload, "output_dir", "config", str, "out")
    return RunConfig(dataset, model, predictors, eval_cfg, output_dir)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"invalid JSON: {err}") from None
    return parse_config(payload)
