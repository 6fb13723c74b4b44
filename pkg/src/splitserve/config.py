"""Experiment configuration: dataclass schema, strict YAML loading, and key=value overrides."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from splitserve.costmodel import PROFILE_FIELDS, HardwareProfile, default_profile, profile_from_dict
from splitserve.engine import ClusterConfig
from splitserve.global_scheduler import SchedulerConfig
from splitserve.profile_table import TableConfig
from splitserve.workload import LengthPredictor, ShapeSpec, WorkloadSpec


class ConfigError(ValueError):
    pass


@dataclass
class SystemConfig:
    """Global routing policy plus the local batching policy it pairs with.

    policy: aps | coloc | disagg | forced. ``local`` overrides the default
    local policy (aps for aps/forced, chunked for coloc, disagg roles for
    disagg).
    """

    policy: str = "aps"
    local: Optional[str] = None
    slo_tbt_ms: float = 100.0
    target_slo_ms: Optional[float] = None
    slo_guard: float = 0.03
    chunk_size: int = 2048
    prefill_cap: Optional[int] = None
    n_prefill: Optional[int] = None
    learn: bool = True
    deadline_aware: bool = True
    seed_table: bool = True
    forced_phi: Optional[Union[float, str]] = None
    forced_s: Optional[int] = None
    orientation: str = "fixed"
    table: TableConfig = field(default_factory=TableConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)

    def __post_init__(self):
        if self.policy not in ("aps", "coloc", "disagg", "forced"):
            raise ConfigError(f"system.policy: unknown policy {self.policy!r}")
        if self.local not in (None, "aps", "chunked", "disagg"):
            raise ConfigError(f"system.local: unknown local policy {self.local!r}")
        if self.slo_tbt_ms <= 0:
            raise ConfigError("system.slo_tbt_ms: must be > 0")
        if not 0 <= self.slo_guard < 1:
            raise ConfigError("system.slo_guard: must be in [0, 1)")
        if self.policy == "forced" and self.forced_phi is None and self.forced_s is None:
            raise ConfigError("system.forced_phi: forced policy needs forced_phi or forced_s")

    @property
    def batch_target_ms(self) -> float:
        """Latency target for batch composition: explicit, or the SLO less the guard band."""
        if self.target_slo_ms is not None:
            return self.target_slo_ms
        return self.slo_tbt_ms * (1.0 - self.slo_guard)

    @property
    def local_policy(self) -> str:
        if self.local:
            return self.local
        return {"aps": "aps", "forced": "aps", "coloc": "chunked", "disagg": "disagg"}[self.policy]


@dataclass
class MetricsConfig:
    ttft_slo_ms: Optional[float] = None
    target_attainment: float = 0.99


@dataclass
class CapacityConfig:
    policies: list = field(default_factory=lambda: ["aps", "disagg", "coloc"])
    lo: float = 0.2
    hi: float = 8.0
    resolution: float = 0.1
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    duration_s: float = 60.0
    ttft_slo_ms: Optional[float] = None
    max_median_sched_delay_ms: Optional[float] = 2000.0
    coloc_chunks: list = field(default_factory=lambda: [256, 512, 1024, 2048])
    early_stop: bool = True


@dataclass
class SweepConfig:
    """Saturated stream for split sweeps; throughput is counted after ``warmup_s``."""

    step: int = 128
    include: list = field(default_factory=list)
    num_requests: int = 1000
    rate_qps: float = 8.0
    warmup_s: float = 50.0


@dataclass
class OutputConfig:
    dir: str = "out"


@dataclass
class ExperimentConfig:
    hardware: HardwareProfile
    seed: int = 0
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    system: SystemConfig = field(default_factory=SystemConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    capacity: CapacityConfig = field(default_factory=CapacityConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


# loading ----------------------------------------------------------------


def _is_optional(tp) -> tuple[bool, Any]:
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) < len(typing.get_args(tp)):
            return True, (args[0] if len(args) == 1 else Union[tuple(args)])
    return False, tp


def _convert(value, tp, path: str):
    optional, inner = _is_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: must not be null")
    tp = inner
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        for arg in typing.get_args(tp):
            try:
                return _convert(value, arg, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: value {value!r} does not match {tp}")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {}
    for name, f in names.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _convert(data[name], hints[name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{sub}: required key missing")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def _hardware(value, path="hardware") -> HardwareProfile:
    if value == "default":
        return default_profile()
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected 'default' or a mapping of profile fields")
    data = dict(value)
    base = data.pop("base", None)
    unknown = sorted(set(data) - set(PROFILE_FIELDS))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key (allowed: base, {', '.join(PROFILE_FIELDS)})")
    if base == "default":
        merged = default_profile().to_dict()
        merged.update(data)
        data = merged
    elif base is not None:
        raise ConfigError(f"{path}.base: only 'default' is supported")
    required = [f for f in PROFILE_FIELDS if f != "noise_sigma"]
    for f in required:
        if f not in data:
            raise ConfigError(f"{path}.{f}: required key missing")
    try:
        return profile_from_dict(data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    if "hardware" not in data:
        raise ConfigError("hardware: required key missing (use 'hardware: default' for the shipped profile)")
    hw = _hardware(data.pop("hardware"))
    wl = data.get("workload", {})
    if isinstance(wl, dict) and "seed" not in wl and "seed" in data:
        wl = dict(wl)
        wl["seed"] = data["seed"]
        data["workload"] = wl
    hints = typing.get_type_hints(ExperimentConfig)
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {"hardware": hw}
    for name in names:
        if name == "hardware" or name not in data:
            continue
        kwargs[name] = _convert(data[name], hints[name], name)
    try:
        cfg = ExperimentConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    path = [k for k in key.strip().split(".") if k]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    return path, yaml.safe_load(raw)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = _deepcopy(data)
    for text in overrides or []:
        path, value = parse_override(text)
        node = data
        for k in path[:-1]:
            nxt = node.get(k)
            if nxt is None or nxt == "default":
                nxt = {"base": "default"} if (k == "hardware" and nxt == "default") else {}
                node[k] = nxt
            if not isinstance(nxt, dict):
                raise ConfigError(f"{'.'.join(path)}: {k} is not a mapping")
            node = nxt
        node[path[-1]] = value
    return data


def _deepcopy(d):
    if isinstance(d, dict):
        return {k: _deepcopy(v) for k, v in d.items()}
    if isinstance(d, list):
        return [_deepcopy(v) for v in d]
    return d


def load_config(path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: YAML parse error: {exc}") from None
    if data is None:
        data = {}
    return config_from_dict(apply_overrides(data, overrides or []))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
