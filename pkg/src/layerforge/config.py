"""Run configuration: YAML file, then environment, then command-line flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import yaml

from .curators.pipeline import PipelineConfig
from .curators.services import ToolEndpoints
from .degradation import DegradationRanges
from .selector import SelectorConfig

ENV_PREFIX = "LAYERFORGE_"
ENV_URLS = {
    "agent_url": "AGENT_URL",
    "editor_url": "EDITOR_URL",
    "segmenter_urls": "SEGMENTER_URLS",
    "embedder_url": "EMBEDDER_URL",
    "verifier_url": "VERIFIER_URL",
}
FILE_KEYS = {"endpoints", "selector", "degradation", "seed", "workers", "max_steps", "max_side"}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    endpoints: Union[str, ToolEndpoints] = "mock"
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    degradation: DegradationRanges = field(default_factory=DegradationRanges)
    seed: Optional[int] = None
    workers: int = 1
    max_steps: int = 5
    max_side: int = 1024

    @property
    def mock(self) -> bool:
        return self.endpoints == "mock"

    def validate(self) -> "RunConfig":
        if self.mock and self.seed is None:
            raise ConfigError("a seed is required in mock mode")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.max_side < 1:
            raise ConfigError("max_side must be >= 1")
        return self

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            selector=self.selector,
            degradation=self.degradation,
            max_steps=self.max_steps,
            max_side=self.max_side,
            seed=self.seed or 0,
            workers=self.workers,
        )


def _endpoints_from(d: dict) -> ToolEndpoints:
    segs = d.get("segmenter_urls")
    if isinstance(segs, str):
        segs = [s.strip() for s in segs.split(",") if s.strip()]
    try:
        return ToolEndpoints(
            agent_url=d.get("agent_url", ""),
            editor_url=d.get("editor_url", ""),
            segmenter_urls=list(segs or []),
            embedder_url=d.get("embedder_url", ""),
            verifier_url=d.get("verifier_url", ""),
            timeout=float(d.get("timeout", 30.0)),
            retries=int(d.get("retries", 2)),
            backoff=float(d.get("backoff", 0.5)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad endpoints: {exc}") from exc


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> RunConfig:
    """Build a RunConfig. ``overrides`` holds flag values; None entries are ignored."""
    environ = os.environ if environ is None else environ
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        stray = set(raw) - FILE_KEYS
        if stray:
            raise ConfigError(f"unknown config keys: {sorted(stray)}")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    endpoints = raw.get("endpoints", "mock")
    env_urls = {k: environ[ENV_PREFIX + v] for k, v in ENV_URLS.items() if environ.get(ENV_PREFIX + v)}
    if env_urls:
        endpoints = {**(endpoints if isinstance(endpoints, dict) else {}), **env_urls}
    if overrides.pop("mock", False):
        endpoints = "mock"
    if isinstance(endpoints, dict):
        endpoints = _endpoints_from(endpoints)
    elif endpoints != "mock":
        raise ConfigError(f"endpoints must be 'mock' or a mapping, got {endpoints!r}")

    sel = dict(raw.get("selector") or {})
    for key in ("tau_local", "tau_global", "tau_dup", "max_foregrounds"):
        if key in overrides:
            sel[key] = overrides.pop(key)
    deg = dict(raw.get("degradation") or {})
    try:
        selector = SelectorConfig(**sel)
        degradation = DegradationRanges(
            kinds=tuple(deg.get("kinds", DegradationRanges.kinds)),
            radius=tuple(deg.get("radius", DegradationRanges.radius)),
            sigma=tuple(deg.get("sigma", DegradationRanges.sigma)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig(
        endpoints=endpoints,
        selector=selector,
        degradation=degradation,
        seed=raw.get("seed"),
        workers=int(raw.get("workers", 1)),
        max_steps=int(raw.get("max_steps", 5)),
        max_side=int(raw.get("max_side", 1024)),
    )
    known = {"seed", "workers", "max_steps", "max_side"}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown overrides: {sorted(unknown)}")
    return replace(cfg, **overrides).validate()
