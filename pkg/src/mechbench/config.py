"""Run configuration: YAML/JSON text -> validated, default-filled dataclasses."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from typing import Any

import yaml

from .circuits import K_GRID


class ConfigError(ValueError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"{path}: {detail}" if path else detail)
        self.path = path


@dataclass(frozen=True)
class ModelSpec:
    checkpoint: str | None = None  # load instead of training when set
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_mlp: int = 256
    train_steps: int = 1500
    train_lr: float = 3e-3
    train_batch_size: int = 64
    n_train: int = 2000


@dataclass(frozen=True)
class DataSpec:
    n_fit: int = 200  # pairs used to compute scores / train featurizers
    n_eval: int = 200  # pairs used for faithfulness / IIA
    eval_split: str = "test_public"
    n_mean: int = 500  # prompts for mean and optimal ablation values


@dataclass(frozen=True)
class CircuitSpec:
    counterfactual: str | None = None  # default: the task's circuit-track counterfactual
    ig_steps: int = 5
    ugs_lambda: float = 1e-3
    ugs_steps: int = 300
    strategy: str = "topn"
    random_seeds: int = 3
    ground_truth: bool = False
    oa_max_steps: int = 300


@dataclass(frozen=True)
class CausalSpec:
    variables: tuple[str, ...] = ()
    counterfactuals: tuple[str, ...] = ()
    layers: tuple[int, ...] | None = None
    selectors: tuple[str, ...] = ()
    das_dim: int | None = None
    epochs: int = 8
    lr: float | None = None
    heads: tuple[tuple[int, int], ...] = ()
    brute_force: bool = False


@dataclass(frozen=True)
class RunConfig:
    task: str
    method: str
    seed: int
    track: str = "circuit"
    ablation: str = "counterfactual"
    k_grid: tuple[float, ...] = K_GRID
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    circuit: CircuitSpec = field(default_factory=CircuitSpec)
    causal: CausalSpec = field(default_factory=CausalSpec)
    output_dir: str = "results"


TASKS = ("ioi", "arithmetic", "mcqa")
TRACKS = ("circuit", "causal")
CIRCUIT_METHODS = ("random", "exact", "eap", "eap_ig_inputs", "eap_ig_activations", "nap", "nap_ig", "ifr", "ugs")
CAUSAL_METHODS = ("full_vector", "dbm_identity", "dbm_pca", "dbm_sae", "das")
ABLATIONS = ("counterfactual", "mean", "optimal")


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except ConfigError:
                pass
        raise ConfigError(path, f"expected {tp}, got {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def _build(cls: type, raw: Any, path: str = "") -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(sub, "missing required key")
    return cls(**kwargs)


def _check(cfg: RunConfig) -> None:
    if cfg.task not in TASKS:
        raise ConfigError("task", f"unknown task {cfg.task!r}")
    if cfg.track not in TRACKS:
        raise ConfigError("track", f"unknown track {cfg.track!r}")
    methods = CIRCUIT_METHODS if cfg.track == "circuit" else CAUSAL_METHODS
    if cfg.method not in methods:
        raise ConfigError("method", f"unknown {cfg.track}-track method {cfg.method!r}")
    if cfg.ablation not in ABLATIONS:
        raise ConfigError("ablation", f"unknown ablation {cfg.ablation!r}")
    if cfg.model.d_model % cfg.model.n_heads:
        raise ConfigError("model.d_model", "must be divisible by model.n_heads")
    if any(not 0 <= k <= 1 for k in cfg.k_grid):
        raise ConfigError("k_grid", "fractions must lie in [0, 1]")


def from_dict(raw: Any) -> RunConfig:
    cfg = _build(RunConfig, raw)
    _check(cfg)
    return cfg


def parse_config(text: str) -> RunConfig:
    """YAML or JSON text -> RunConfig; unknown keys and type mismatches name the key path."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"not valid YAML: {exc}") from exc
    return from_dict(raw if raw is not None else {})


def to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, tuple):
        return [to_dict(v) for v in cfg]
    return cfg


def emit(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def override(cfg: RunConfig, dotted: dict[str, Any]) -> RunConfig:
    """Apply ``{"a.b": value}`` overrides and revalidate."""
    raw = to_dict(cfg)
    for key, value in dotted.items():
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(key, "unknown key")
            node = node[p]
        node[parts[-1]] = value
    return from_dict(raw)
