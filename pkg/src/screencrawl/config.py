"""Run configuration. Precedence: defaults < JSON config file < SCREENCRAWL_* environment < flags."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

ENV_PREFIX = "SCREENCRAWL_"


class ConfigError(ValueError):
    pass


@dataclass
class LlmSettings:
    url: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    transcript: str = ""  # scripted double; takes priority over url when set
    multimodal: bool = False
    timeout: float = 60.0
    failure_budget: int = 3


@dataclass
class CliConfig:
    dataset_root: str = "dataset"
    scenario: str = ""
    metadata: str = ""
    apps_dir: str = ""
    seed: int = 0
    instances: int = 8
    concurrency: int = 0  # 0 = one session per instance
    policies: str = "rules,llm,human-queue"
    hamming_threshold: int = 5
    max_steps: int = 1000
    idle_window: int = 10
    max_attempts: int = 3
    trigger_keywords: list[str] = field(default_factory=lambda: ["login", "sign in"])
    llm: LlmSettings = field(default_factory=LlmSettings)

    def to_obj(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value, like, name: str):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    if isinstance(like, list):
        if isinstance(value, str):
            return [v.strip() for v in value.split(",") if v.strip()]
        return list(value)
    return str(value)


def _apply(target, values: Mapping, origin: str, prefix: str = "") -> None:
    names = {f.name for f in dataclasses.fields(target)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"{origin}: unknown setting {prefix}{key!r}")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{origin}: {prefix}{key} must be an object")
            _apply(current, value, origin, f"{prefix}{key}.")
        else:
            setattr(target, key, _coerce(value, current, f"{prefix}{key}"))


def _from_env(env: Mapping[str, str]) -> dict:
    out: dict = {}
    top = {f.name for f in dataclasses.fields(CliConfig)}
    sub = {f.name for f in dataclasses.fields(LlmSettings)}
    for k, v in env.items():
        if not k.startswith(ENV_PREFIX):
            continue
        name = k[len(ENV_PREFIX):].lower()
        if name.startswith("llm_") and name[4:] in sub:
            out.setdefault("llm", {})[name[4:]] = v
        elif name in top and name != "llm":
            out[name] = v
    return out


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping | None = None,
) -> CliConfig:
    cfg = CliConfig()
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold an object")
        _apply(cfg, doc, str(path))
    _apply(cfg, _from_env(os.environ if env is None else env), "environment")
    if overrides:
        _apply(cfg, {k: v for k, v in overrides.items() if v is not None}, "flags")
    validate(cfg)
    return cfg


def validate(cfg: CliConfig) -> None:
    if not 0 <= cfg.hamming_threshold <= 64:
        raise ConfigError("hamming_threshold must lie in [0, 64]")
    if cfg.max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    if cfg.idle_window < 2:
        raise ConfigError("idle_window must be >= 2")
    if cfg.instances < 1:
        raise ConfigError("instances must be >= 1")
    if cfg.max_attempts < 1:
        raise ConfigError("max_attempts must be >= 1")
    levels = policy_levels(cfg.policies)
    if not levels or levels[0] != "rules":
        raise ConfigError("policies must start with 'rules'")


def policy_levels(spec: str) -> list[str]:
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    for p in parts:
        if p not in ("rules", "llm", "human-queue"):
            raise ConfigError(f"unknown policy {p!r}")
    return [p for p in parts if p != "human-queue"]
