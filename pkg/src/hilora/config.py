"""Experiment configuration: one JSON document, every field overridable by path."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, InvalidSpec
from .router import RouterConfig
from .world import WorldSpec

METHODS = ("hilora", "gs_only", "roc_only", "retriever", "ensemble", "merged", "oracle")


@dataclass
class EvalSpec:
    seen_per_task: int = 200
    unseen_tasks: int = 0
    unseen_per_task: int = 200
    unseen_kl: float = 2.0

    def validate(self) -> None:
        if self.seen_per_task < 0 or self.unseen_per_task < 0 or self.unseen_tasks < 0:
            raise ConfigError("eval", "counts must be non-negative")
        if self.unseen_kl < 0:
            raise ConfigError("eval.unseen_kl", "must be non-negative")


@dataclass
class OutputSpec:
    records: str | None = None  # JSON-lines with timings
    decisions: str | None = None  # JSON-lines, deterministic
    summary: str | None = None


@dataclass
class ExperimentConfig:
    seed: int | None = None
    method: str = "hilora"
    pool_manifest: str | None = None
    world: WorldSpec = field(default_factory=WorldSpec)
    router: RouterConfig = field(default_factory=RouterConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("seed", "a seed is required")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed", f"must be a non-negative integer, got {self.seed!r}")
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}; got {self.method!r}")
        try:
            self.world.validate()
        except InvalidSpec as exc:
            raise ConfigError("world", str(exc)) from exc
        self.eval.validate()
        if self.eval.seen_per_task == 0 and (self.eval.unseen_tasks == 0 or self.eval.unseen_per_task == 0):
            raise ConfigError("eval", "evaluation set is empty")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["router"].pop("seed", None)
        return out


_SECTIONS = {"world": WorldSpec, "router": RouterConfig, "eval": EvalSpec, "output": OutputSpec}


def _check_value(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and path != "world.ranks":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif path == "world.ranks":
        ok = (isinstance(value, int) and not isinstance(value, bool)) or (
            isinstance(value, list) and all(isinstance(v, int) for v in value))
    else:
        ok = value is None or isinstance(value, str)
    if not ok:
        raise ConfigError(path, f"unexpected value {value!r}")
    return value


def _build_section(name: str, cls, doc: Any):
    if not isinstance(doc, dict):
        raise ConfigError(name, "must be an object")
    proto = cls()
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in doc.items():
        if key not in known or (cls is RouterConfig and key == "seed"):
            raise ConfigError(f"{name}.{key}", "unknown field")
        kwargs[key] = _check_value(f"{name}.{key}", value, getattr(proto, key))
    return cls(**kwargs)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(key, "unknown field")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key == "seed":
            kwargs[key] = value
        else:
            kwargs[key] = _check_value(key, value, getattr(ExperimentConfig(), key))
    cfg = ExperimentConfig(**kwargs)
    if cfg.seed is not None:
        cfg.router.seed = cfg.seed if isinstance(cfg.seed, int) else 0
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value``; the value is read as JSON, falling back to a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError("--set", f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    for key, value in overrides:
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot descend into a non-object")
        node[parts[-1]] = value
    return doc
