"""Run configuration: nested per-module settings with TOML loading, dotted
command-line overrides, unknown-key rejection, and stable hashing for run
snapshots."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .alignment import AlignConfig
from .coloradv import ColorAdvConfig
from .models import ModelConfig
from .swift import SwiftConfig
from .synthgen import CorpusConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    k: int = 0  # 0 -> use swift.bag_size
    sensitivity_target: float = 0.95
    include_absent_classes: bool = False
    explain_topk: int = 32


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    synth: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    swift: SwiftConfig = field(default_factory=SwiftConfig)
    coloradv: ColorAdvConfig = field(default_factory=ColorAdvConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def eval_k(self) -> int:
        return self.eval.k or self.swift.bag_size


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    origin = getattr(target_type, "__origin__", None)
    if is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table, got {value!r}")
        return _build(target_type, value, path)
    if origin is dict:
        _, val_t = target_type.__args__
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table, got {value!r}")
        return {k: _coerce(v, val_t, f"{path}.{k}") for k, v in value.items()}
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        args = target_type.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, t, f"{path}[{i}]") for i, (v, t) in enumerate(zip(value, args)))
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Dict[str, Any], path: str = ""):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    hints = _type_hints(cls)
    for name, value in data.items():
        kwargs[name] = _coerce(value, hints[name], f"{path}.{name}" if path else name)
    defaults = cls()
    return replace(defaults, **kwargs)


def _type_hints(cls) -> Dict[str, Any]:
    import typing

    return typing.get_type_hints(cls)


def load_config(path: Optional[Path | str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, overlaid by an optional TOML file, overlaid by dotted-key
    overrides (e.g. {"swift.iterations": 100})."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with path.open("rb") as f:
            data = tomllib.load(f)
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} conflicts with a scalar key")
        node[parts[-1]] = value
    return _build(RunConfig, data)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse a KEY=VALUE command-line override; VALUE uses TOML literal syntax."""
    if "=" not in text:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    return key.strip(), value


def config_to_dict(cfg: Any) -> Any:
    if is_dataclass(cfg):
        return {f.name: config_to_dict(getattr(cfg, f.name)) for f in fields(cfg)}
    if isinstance(cfg, dict):
        return {k: config_to_dict(v) for k, v in cfg.items()}
    if isinstance(cfg, (list, tuple)):
        return [config_to_dict(v) for v in cfg]
    return cfg


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_snapshot(cfg: RunConfig, out_dir: Path | str, command: str, extra: Optional[dict] = None) -> Path:
    """Every run directory is self-describing: resolved config, seed, version."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "command": command,
        "package_version": __version__,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
    }
    if extra:
        snapshot.update(extra)
    path = out_dir / "config.json"
    path.write_text(json.dumps(snapshot, indent=1))
    return path
