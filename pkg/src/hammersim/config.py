"""Scenario configuration: YAML in, validated dataclasses out, and back."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import profiles
from .defenses import DefenseConfig
from .dram import PAGE_POLICIES, CellParams, ControllerPolicy, DramGeometry
from .hammer import HammerTechnique
from .orchestrator import AttackConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class DramSection:
    page_policy: str = "adaptive"
    close_timeout_ns: int = 200
    combine_window: int | None = None
    para_probability: float | None = None
    trr_radius: int | None = None
    mac_max_activations: int | None = None
    refresh_mode: str | None = None  # None keeps the profile's

    def __post_init__(self):
        if self.page_policy not in PAGE_POLICIES:
            raise ConfigError(f"page_policy: expected one of {list(PAGE_POLICIES)}, got {self.page_policy!r}")
        p = self.para_probability
        if p is not None and not 0.0 <= p <= 1.0:
            raise ConfigError(f"para_probability: probability ∈ [0,1], got {p}")
        if self.refresh_mode not in (None, "normal", "double"):
            raise ConfigError("refresh_mode: expected 'normal' or 'double'")
        try:
            self.policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def policy(self) -> ControllerPolicy:
        return ControllerPolicy(self.page_policy, self.close_timeout_ns, self.combine_window, self.para_probability,
                                self.trr_radius, self.mac_max_activations)

    def geometry(self, profile: str) -> DramGeometry:
        geo = profiles.GEOMETRIES[profile]
        if self.refresh_mode is not None:
            geo = dataclasses.replace(geo, refresh_mode=self.refresh_mode)
        return geo


@dataclass(frozen=True)
class CellsSection:
    density: float = profiles.DESKTOP_CELLS.density
    mu: float = profiles.DESKTOP_CELLS.mu
    sigma: float = profiles.DESKTOP_CELLS.sigma
    anti_fraction: float = profiles.DESKTOP_CELLS.anti_fraction

    def __post_init__(self):
        try:
            self.params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def params(self) -> CellParams:
        return CellParams(self.density, self.mu, self.sigma, self.anti_fraction)


@dataclass(frozen=True)
class TemplateSection:
    technique: str = "one_location"
    attempts: int = profiles.ATTEMPTS_PER_RUN
    address_knowledge: str = "full"

    def __post_init__(self):
        HammerTechnique(self.technique)
        if self.attempts < 1:
            raise ConfigError("attempts: expected >= 1")
        if self.address_knowledge not in ("none", "full"):
            raise ConfigError("address_knowledge: expected 'none' or 'full'")


@dataclass(frozen=True)
class WaylaySection:
    frames: int = 3 * 2**20  # 12 GiB
    runs: int = 20
    relocations: int = 57_000
    heatmap_bins: int = 256
    usage_bin_percent: float = 1.0

    def __post_init__(self):
        if self.frames < 4096:
            raise ConfigError("frames: expected >= 4096")
        for name in ("runs", "relocations", "heatmap_bins"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: expected >= 1")
        if not 0 < self.usage_bin_percent <= 100:
            raise ConfigError("usage_bin_percent: expected in (0, 100]")


@dataclass(frozen=True)
class DosSection:
    machines: tuple = ("desktop",)
    seek_cap_s: float = 8 * 3600.0
    destroy_cap_s: float = 60.0

    def __post_init__(self):
        if not self.machines:
            raise ConfigError("machines: expected at least one machine")
        for m in self.machines:
            if m not in ("desktop", "server"):
                raise ConfigError(f"machines: expected 'desktop' or 'server', got {m!r}")
        if self.seek_cap_s <= 0 or self.destroy_cap_s <= 0:
            raise ConfigError("seek_cap_s/destroy_cap_s: expected > 0")


@dataclass(frozen=True)
class OptimizerSection:
    memory_gib: float = 12.0
    W: float = 2.68
    F: float = 0.67
    E: int = 29
    bound: int = 100_000

    def __post_init__(self):
        if self.memory_gib <= 0 or self.F <= 0 or self.W < 0:
            raise ConfigError("memory_gib and F must be > 0, W >= 0")
        if not 1 <= self.E <= 2**16:
            raise ConfigError("E: expected 1..65536")
        if self.bound < 1:
            raise ConfigError("bound: expected >= 1")


@dataclass(frozen=True)
class OpflipSection:
    database: str | None = None  # flip database file; bundled fixture when unset
    image: str | None = None  # binary to scan; synthetic image of the database when unset
    ranges: tuple = ()  # [start, end) byte ranges; the target page when empty

    def __post_init__(self):
        for r in self.ranges:
            if len(r) != 2 or not 0 <= r[0] <= r[1]:
                raise ConfigError(f"ranges: expected [start, end) pairs with 0 <= start <= end, got {r!r}")


@dataclass(frozen=True)
class CalibrationSection:
    verify_attempts: int = 0  # simulated templating attempts per technique after fitting; 0 skips

    def __post_init__(self):
        if self.verify_attempts < 0:
            raise ConfigError("verify_attempts: expected >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    profile: str = "desktop"
    allocator: str = "catt"
    out: str = "reports"
    dram: DramSection = field(default_factory=DramSection)
    cells: CellsSection = field(default_factory=CellsSection)
    defenses: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    escalation_profile: str = "escalation"
    template: TemplateSection = field(default_factory=TemplateSection)
    waylay: WaylaySection = field(default_factory=WaylaySection)
    dos: DosSection = field(default_factory=DosSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    opflip: OpflipSection = field(default_factory=OpflipSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed: expected a non-negative integer")
        for name in ("profile", "escalation_profile"):
            if getattr(self, name) not in profiles.GEOMETRIES:
                raise ConfigError(f"{name}: expected one of {sorted(profiles.GEOMETRIES)}")
        if self.allocator not in ("default", "catt"):
            raise ConfigError("allocator: expected 'default' or 'catt'")


def _check_type(path: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(path, value, inner[0])
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}; expected one of {sorted(names)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = _check_type(sub, value, hint)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc}" if path and not str(exc).startswith(path) else str(exc)) from None
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data) -> ScenarioConfig:
    return _build(ScenarioConfig, data)


def parse_config(path) -> ScenarioConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return config_from_dict(data)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(config: ScenarioConfig) -> dict:
    return _plain(config)


def dump_config(config: ScenarioConfig, omit=()) -> str:
    data = {k: v for k, v in config_to_dict(config).items() if k not in omit}
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)
