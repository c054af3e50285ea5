"""Run configuration: TOML sections mapped onto frozen dataclasses.

Unknown keys are rejected so typos fail fast, and every referenced path
must exist at load time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .simlab import SimConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class AnnotatorSettings:
    base_url: str = ""
    model: str = "annotator"
    timeout_s: float = 60.0
    retries: int = 5
    parse_retries: int = 3
    backoff_base_s: float = 0.5
    rate_limit_per_s: float = 0.0
    mc_temperature: float = 1.0
    summary_temperature: float = 0.2
    max_output_tokens: int = 768
    synthetic_noise: float = 0.0
    synthetic_va_sigma: float = 0.0


@dataclass(frozen=True)
class LimitsSettings:
    max_calls: int = 1_000_000


@dataclass(frozen=True)
class UamcSettings:
    max_samples: int = 5
    seed: int = 42
    au_aggregate: str = "mean"


@dataclass(frozen=True)
class PromptSettings:
    rewrite_templates: Optional[str] = None


@dataclass(frozen=True)
class SamplingSettings:
    paraphrase_rounds: bool = False


@dataclass(frozen=True)
class EvalSettings:
    llm_normalize: bool = False
    va_tolerance: Optional[float] = None


@dataclass(frozen=True)
class IoSettings:
    au_mode: str = "occurrence"


@dataclass(frozen=True)
class RunConfig:
    annotator: AnnotatorSettings
    limits: LimitsSettings
    uamc: UamcSettings
    prompts: PromptSettings
    sampling: SamplingSettings
    eval: EvalSettings
    io: IoSettings
    sim: SimConfig


def _build(section_name: str, cls, table: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"[{section_name}]: unknown keys {unknown}")
    lists_to_tuples = {
        k: tuple(v) if isinstance(v, list) else v for k, v in table.items()
    }
    try:
        return cls(**lists_to_tuples)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section_name}]: {exc}") from None


_SECTIONS = {
    "annotator": AnnotatorSettings,
    "limits": LimitsSettings,
    "uamc": UamcSettings,
    "prompts": PromptSettings,
    "sampling": SamplingSettings,
    "eval": EvalSettings,
    "io": IoSettings,
    "sim": SimConfig,
}


def _validate(cfg: RunConfig) -> None:
    if cfg.uamc.max_samples < 2:
        raise ConfigError("[uamc]: max_samples must be at least 2")
    if cfg.uamc.au_aggregate not in ("mean", "max"):
        raise ConfigError(f"[uamc]: unknown au_aggregate {cfg.uamc.au_aggregate!r}")
    if cfg.limits.max_calls < 1:
        raise ConfigError("[limits]: max_calls must be positive")
    ann = cfg.annotator
    if not 0.0 <= ann.mc_temperature <= 2.0 or not 0.0 <= ann.summary_temperature <= 2.0:
        raise ConfigError("[annotator]: temperatures must lie in [0, 2]")
    if ann.retries < 0 or ann.parse_retries < 0:
        raise ConfigError("[annotator]: retry counts must be nonnegative")
    if ann.timeout_s <= 0:
        raise ConfigError("[annotator]: timeout_s must be positive")
    if not 0.0 <= ann.synthetic_noise <= 1.0:
        raise ConfigError("[annotator]: synthetic_noise must lie in [0, 1]")
    if ann.synthetic_va_sigma < 0:
        raise ConfigError("[annotator]: synthetic_va_sigma must be nonnegative")
    if ann.max_output_tokens < 1:
        raise ConfigError("[annotator]: max_output_tokens must be positive")
    if cfg.io.au_mode not in ("occurrence", "intensity"):
        raise ConfigError(f"[io]: unknown au_mode {cfg.io.au_mode!r}")
    if cfg.eval.va_tolerance is not None and cfg.eval.va_tolerance <= 0:
        raise ConfigError("[eval]: va_tolerance must be positive")
    templates = cfg.prompts.rewrite_templates
    if templates is not None and not os.path.exists(templates):
        raise ConfigError(f"[prompts]: rewrite_templates path does not exist: {templates}")


def load_config(path: str) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    parts = {}
    for name, cls in _SECTIONS.items():
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = _build(name, cls, table)
    cfg = RunConfig(**parts)
    _validate(cfg)
    return cfg


def default_config() -> RunConfig:
    return RunConfig(
        annotator=AnnotatorSettings(),
        limits=LimitsSettings(),
        uamc=UamcSettings(),
        prompts=PromptSettings(),
        sampling=SamplingSettings(),
        eval=EvalSettings(),
        io=IoSettings(),
        sim=SimConfig(),
    )
