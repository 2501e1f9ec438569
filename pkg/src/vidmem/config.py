"""Scope presets per benchmark split and the YAML runtime config."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .backends import API_KEY_ENV, HttpSettings
from .errors import ConfigError
from .memory import ScopeConfig


@dataclass(frozen=True)
class Preset:
    name: str
    t_coarse_s: int
    t_fine_s: int
    t_ultrafine_s: int
    fps: tuple[Fraction, Fraction, Fraction]
    # duration split this preset applies to: [min_s, max_s), max None = open
    min_s: int = 0
    max_s: int | None = None

    def scope(self, **overrides) -> ScopeConfig:
        cfg = ScopeConfig(self.t_coarse_s, self.t_fine_s, self.t_ultrafine_s, dict(enumerate(self.fps)))
        return cfg.with_overrides(**overrides) if overrides else cfg


_F = Fraction
_STD = (_F(1), _F(2), _F(2))

PRESETS: dict[str, Preset] = {p.name: p for p in [
    Preset("mlvu-short", 30, 5, 1, _STD, 0, 600),
    Preset("mlvu-medium", 60, 5, 1, _STD, 600, 1200),
    Preset("mlvu-long", 100, 10, 1, _STD, 1200, 3600),
    Preset("mlvu-extra-long", 200, 10, 1, _STD, 3600, None),
    Preset("videomme-short", 5, 1, 1, (_F(2), _F(4), _F(4))),
    Preset("videomme-medium", 50, 5, 1, _STD),
    Preset("videomme-long", 100, 10, 1, _STD),
    Preset("lvbench-short", 100, 10, 1, _STD, 1800, 3600),
    Preset("lvbench-medium", 150, 10, 1, _STD, 3600, 5400),
    Preset("lvbench-long", 200, 10, 1, _STD, 5400, None),
    Preset("egomem", 800, 80, 8, (_F(1, 4), _F(1, 2), _F(1))),
]}

DEFAULT_PRESET = "lvbench-long"


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def preset_for_duration(benchmark: str, duration_s: int) -> Preset:
    """Pick the split preset of ``benchmark`` whose duration range holds ``duration_s``."""
    ranged = [p for p in PRESETS.values() if p.name.startswith(benchmark + "-") and
              (p.min_s or p.max_s is not None)]
    for p in ranged:
        if p.min_s <= duration_s and (p.max_s is None or duration_s < p.max_s):
            return p
    if ranged and duration_s < min(p.min_s for p in ranged):
        return min(ranged, key=lambda p: p.min_s)
    raise ConfigError(f"no duration-split preset for benchmark {benchmark!r} at {duration_s} s")


def preset_table() -> list[dict]:
    """Flat rows, used by the checked-in golden table."""
    return [{"name": p.name, "t_coarse_s": p.t_coarse_s, "t_fine_s": p.t_fine_s,
             "t_ultrafine_s": p.t_ultrafine_s, "fps_coarse": str(p.fps[0]), "fps_fine": str(p.fps[1]),
             "fps_ultrafine": str(p.fps[2])} for p in PRESETS.values()]


def preset_csv() -> str:
    buf = io.StringIO()
    rows = preset_table()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


@dataclass
class EndpointConfig:
    base_url: str = "http://localhost:8000"
    model: str = ""
    timeout_s: float = 120.0
    max_retries: int = 3

    def settings(self, api_key: str | None) -> HttpSettings:
        if not self.model:
            raise ConfigError(f"no model configured for endpoint {self.base_url}")
        return HttpSettings(self.base_url, self.model, self.timeout_s, self.max_retries, api_key=api_key)


@dataclass
class Config:
    reasoner: EndpointConfig = field(default_factory=EndpointConfig)
    captioner: EndpointConfig = field(default_factory=EndpointConfig)
    preset: str = DEFAULT_PRESET
    workers: int = 8
    context_budget: int = 200_000
    max_repairs: int = 2
    cache_dir: str = ".vidmem-cache"
    decoder: str = "ffmpeg"
    probe: str = "ffprobe"
    api_key: str | None = field(default=None, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> Config:
        d = dict(d or {})
        try:
            backends = d.pop("backends", {}) or {}
            cfg = cls(
                reasoner=EndpointConfig(**(backends.get("reasoner") or {})),
                captioner=EndpointConfig(**(backends.get("captioner") or {})),
                **d,
            )
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if cfg.workers < 1 or cfg.context_budget < 1 or cfg.max_repairs < 0:
            raise ConfigError("workers and context_budget must be positive, max_repairs >= 0")
        get_preset(cfg.preset)
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> Config:
        if path is None:
            cfg = cls()
        else:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                data = yaml.safe_load(p.read_text(encoding="utf-8"))
            except yaml.YAMLError as exc:
                raise ConfigError(f"unreadable config {p}: {exc}") from exc
            if data is not None and not isinstance(data, dict):
                raise ConfigError(f"config {p} must be a mapping")
            cfg = cls.from_dict(data or {})
        env_key = os.environ.get(API_KEY_ENV)
        if env_key:
            cfg.api_key = env_key
        return cfg
