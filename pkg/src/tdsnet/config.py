"""Run configuration: parsed from a TOML file, overridden by TDSNET_* environment
variables, then by command-line flags, validated and frozen."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import tomli

ENV_PREFIX = "TDSNET_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # episode shape
    n_way: int = 5
    k_shot: int = 1
    q_per: int = 15
    eval_q_per: int = 15
    # network
    image_size: int = 84
    backbone_widths: tuple[int, ...] = (64, 64, 64, 64)
    backbone_pools: tuple[bool, ...] = (True, True, True, True)
    hconv: str = "conv3x3"
    share_relation: bool = False
    relation_init: str = "kaiming"
    m: int = 8
    # task-aware attention
    topk: int = 3
    t: float = 20.0
    attention: str = "task"          # task | uniform
    attention_mode: str = "smooth"   # smooth | hard, used in training
    eval_attention_mode: str = "smooth"
    attention_norm: str = "task"     # task | class
    detach_threshold: bool = True
    detach_teacher: bool = True
    # ablation switches
    use_lfe: bool = True
    use_local: bool = True
    # optimisation
    lam: float = 0.4
    lr: float = 0.001
    halving_interval: int = 100_000
    epochs: int = 600
    episodes_per_epoch: int = 100
    loss_reduction: str = "mean"     # mean | sum over queries
    grad_clip: float = 0.0           # global-norm clip, 0 disables
    flip_augment: bool = False
    # bookkeeping
    seed: int = 0
    precision: str = "float32"
    val_episodes: int = 100
    eval_episodes: int = 600
    data_root: str = ""
    output_dir: str = "runs/default"

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def digest(self) -> str:
        """Hash of every field that affects numerics (paths excluded)."""
        d = self.to_dict()
        for k in ("data_root", "output_dir", "eval_episodes"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def feature_hw(self) -> int:
        size = self.image_size
        for pool in self.backbone_pools:
            size = size // 2 if pool else size
        return size


_CHOICES = {
    "hconv": ("conv3x3", "conv1x1", "identity"),
    "relation_init": ("kaiming", "identity"),
    "attention": ("task", "uniform"),
    "attention_mode": ("smooth", "hard"),
    "eval_attention_mode": ("smooth", "hard"),
    "attention_norm": ("task", "class"),
    "loss_reduction": ("mean", "sum"),
    "precision": ("float32", "float64"),
}


def validate(cfg: RunConfig) -> None:
    for name, allowed in _CHOICES.items():
        if getattr(cfg, name) not in allowed:
            raise ConfigError(f"{name} must be one of {allowed}, got {getattr(cfg, name)!r}")
    for name in ("n_way", "k_shot", "q_per", "eval_q_per", "image_size", "m", "topk",
                 "halving_interval", "episodes_per_epoch"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.epochs < 0 or cfg.lam < 0 or cfg.lr <= 0 or cfg.grad_clip < 0:
        raise ConfigError("epochs, lam and grad_clip must be non-negative and lr positive")
    if len(cfg.backbone_widths) != len(cfg.backbone_pools) or not cfg.backbone_widths:
        raise ConfigError("backbone_widths and backbone_pools must be non-empty and equally long")
    hw = cfg.feature_hw
    if hw < 1:
        raise ConfigError(f"image_size {cfg.image_size} collapses to nothing in the backbone")
    if cfg.topk > cfg.n_way * hw * hw:
        raise ConfigError(f"topk={cfg.topk} exceeds the {cfg.n_way * hw * hw} support descriptors")


def _coerce(name: str, value: Any, default: Any) -> Any:
    """Convert raw TOML/env/flag values to the type of the field default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            kind = type(default[0])
            return tuple(_coerce(name, v, default[0]) if kind is bool else kind(v) for v in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def build_config(file_values: Mapping[str, Any] | None = None,
                 env: Mapping[str, str] | None = None,
                 overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge file < environment < overrides; unknown keys are errors."""
    defaults = {f.name: f.default for f in fields(RunConfig)}
    merged: dict[str, Any] = {}
    for key, value in (file_values or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value, defaults[key])
    env = os.environ if env is None else env
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name not in defaults:
                raise ConfigError(f"unknown config key {name!r} (from {key})")
            merged[name] = _coerce(name, value, defaults[name])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value, defaults[key])
    return RunConfig(**merged)


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as fh:
                values = tomli.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return build_config(values, env, overrides)


def config_from_dict(d: Mapping[str, Any]) -> RunConfig:
    return build_config(d, env={}, overrides=None)


def tiny_config(**changes) -> RunConfig:
    """2-way 1-shot, 2 queries, 16x16 images, 8-channel 2-block backbone, m=2, k=2, float64."""
    base = dict(n_way=2, k_shot=1, q_per=1, eval_q_per=1, image_size=16, backbone_widths=(8, 8),
                backbone_pools=(True, True), m=2, topk=2, precision="float64",
                episodes_per_epoch=10, epochs=1)
    base.update(changes)
    return RunConfig(**base)
