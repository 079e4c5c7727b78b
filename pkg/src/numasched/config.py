"""Daemon configuration: a JSON document with defaults for every key.

Example::

    {
      "interval_ms": 1000,
      "targets": ["ferret", "canneal"],
      "importance": [{"match": "ferret", "weight": 2.0}, {"pid": 4242, "weight": 3}],
      "pins": [{"match": "mysqld", "cpus": "0-3"}],
      "thresholds": {"imbalance": 0.2, "idle": 0.1, "contention": 0.5},
      "dry_run": true,
      "log_format": "json"
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .errors import ConfigError
from .procmon import PidFilter
from .reporter import ImportanceRule, ImportanceTable, Thresholds
from .scheduler import PinRule, PinTable, SchedulerConfig
from .topology import format_cpulist, parse_cpulist

LOG_FORMATS = ("text", "json")

_KEYS = {
    "interval_ms", "proc_root", "sysfs_root", "targets", "pids", "importance", "pins",
    "thresholds", "dry_run", "log_format", "ticks_per_second",
}
_THRESHOLD_KEYS = {"imbalance", "idle", "contention"}


@dataclass(frozen=True)
class DaemonConfig:
    interval_ms: int = 1000
    proc_root: str = "/proc"
    sysfs_root: str = "/sys"
    targets: tuple = ()
    pids: tuple = ()
    importance: tuple = ()
    pins: tuple = ()
    thresholds: Thresholds = field(default_factory=Thresholds)
    dry_run: bool = False
    log_format: str = "text"
    ticks_per_second: int = 100

    @property
    def interval(self) -> float:
        return self.interval_ms / 1000.0

    def importance_table(self) -> ImportanceTable:
        return ImportanceTable(self.importance)

    def pin_table(self) -> PinTable:
        return PinTable(self.pins)

    def pid_filter(self) -> PidFilter:
        if self.pids or self.targets:
            return PidFilter(pids=self.pids, patterns=self.targets)
        # without explicit targets, watch whatever the importance rules name
        return PidFilter(
            pids=tuple(r.pid for r in self.importance if r.pid is not None),
            patterns=tuple(r.pattern for r in self.importance if r.pattern))

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(pins=self.pin_table(),
                               contention_threshold=self.thresholds.contention)

    def with_overrides(self, **changes) -> "DaemonConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        cfg = replace(self, **changes)
        validate(cfg)
        return cfg


def _number(value: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number")
    return float(value)


def _string_list(value: Any, key: str) -> tuple:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{key} must be a list of strings")
    return tuple(value)


def _selector(entry: Mapping, key: str) -> dict:
    has_pid, has_match = "pid" in entry, "match" in entry
    if has_pid == has_match:
        raise ConfigError(f"{key} needs exactly one of 'pid' or 'match'")
    if has_pid:
        if isinstance(entry["pid"], bool) or not isinstance(entry["pid"], int) or entry["pid"] <= 0:
            raise ConfigError(f"{key}.pid must be a positive integer")
        return {"pid": entry["pid"]}
    if not isinstance(entry["match"], str) or not entry["match"]:
        raise ConfigError(f"{key}.match must be a non-empty string")
    return {"pattern": entry["match"]}


def validate(cfg: DaemonConfig) -> DaemonConfig:
    if isinstance(cfg.interval_ms, bool) or not isinstance(cfg.interval_ms, int) \
            or cfg.interval_ms <= 0:
        raise ConfigError("interval_ms must be a positive integer")
    if cfg.ticks_per_second <= 0:
        raise ConfigError("ticks_per_second must be positive")
    for rule in cfg.importance:
        if rule.weight <= 0:
            raise ConfigError("importance weight must be positive")
    for name in ("imbalance", "idle", "contention"):
        if getattr(cfg.thresholds, name) < 0:
            raise ConfigError(f"thresholds.{name} must be non-negative")
    if cfg.log_format not in LOG_FORMATS:
        raise ConfigError(f"log_format must be one of {LOG_FORMATS}")
    return cfg


def config_from_dict(doc: Mapping) -> DaemonConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kw: dict = {}

    if "interval_ms" in doc:
        v = doc["interval_ms"]
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError("interval_ms must be a positive integer")
        kw["interval_ms"] = v
    for key in ("proc_root", "sysfs_root", "log_format"):
        if key in doc:
            if not isinstance(doc[key], str):
                raise ConfigError(f"{key} must be a string")
            kw[key] = doc[key]
    if "dry_run" in doc:
        if not isinstance(doc["dry_run"], bool):
            raise ConfigError("dry_run must be true or false")
        kw["dry_run"] = doc["dry_run"]
    if "ticks_per_second" in doc:
        v = doc["ticks_per_second"]
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError("ticks_per_second must be a positive integer")
        kw["ticks_per_second"] = v
    if "targets" in doc:
        kw["targets"] = _string_list(doc["targets"], "targets")
    if "pids" in doc:
        pids = doc["pids"]
        if not isinstance(pids, list) or not all(
                isinstance(p, int) and not isinstance(p, bool) and p > 0 for p in pids):
            raise ConfigError("pids must be a list of positive integers")
        kw["pids"] = tuple(pids)

    if "importance" in doc:
        if not isinstance(doc["importance"], list):
            raise ConfigError("importance must be a list")
        rules = []
        for i, entry in enumerate(doc["importance"]):
            key = f"importance[{i}]"
            if not isinstance(entry, Mapping):
                raise ConfigError(f"{key} must be an object")
            extra = set(entry) - {"pid", "match", "weight"}
            if extra:
                raise ConfigError(f"{key}: unknown key(s) {sorted(extra)}")
            if "weight" not in entry:
                raise ConfigError(f"{key}.weight is required")
            weight = _number(entry["weight"], f"{key}.weight")
            if weight <= 0:
                raise ConfigError(f"{key}.weight must be positive")
            rules.append(ImportanceRule(weight, **_selector(entry, key)))
        kw["importance"] = tuple(rules)

    if "pins" in doc:
        if not isinstance(doc["pins"], list):
            raise ConfigError("pins must be a list")
        rules = []
        for i, entry in enumerate(doc["pins"]):
            key = f"pins[{i}]"
            if not isinstance(entry, Mapping):
                raise ConfigError(f"{key} must be an object")
            extra = set(entry) - {"pid", "match", "cpus"}
            if extra:
                raise ConfigError(f"{key}: unknown key(s) {sorted(extra)}")
            cpus = entry.get("cpus")
            try:
                if isinstance(cpus, str):
                    cores = frozenset(parse_cpulist(cpus))
                elif isinstance(cpus, list):
                    cores = frozenset(int(c) for c in cpus)
                else:
                    raise ConfigError(f"{key}.cpus must be a cpulist string or list")
            except ValueError as exc:
                raise ConfigError(f"{key}.cpus: {exc}") from None
            if not cores:
                raise ConfigError(f"{key}.cpus must not be empty")
            rules.append(PinRule(cores, **_selector(entry, key)))
        kw["pins"] = tuple(rules)

    if "thresholds" in doc:
        th = doc["thresholds"]
        if not isinstance(th, Mapping):
            raise ConfigError("thresholds must be an object")
        extra = set(th) - _THRESHOLD_KEYS
        if extra:
            raise ConfigError(f"thresholds: unknown key(s) {sorted(extra)}")
        values = {k: _number(v, f"thresholds.{k}") for k, v in th.items()}
        for k, v in values.items():
            if v < 0:
                raise ConfigError(f"thresholds.{k} must be non-negative")
        kw["thresholds"] = Thresholds(**values)

    return validate(DaemonConfig(**kw))


def parse_config(text: str) -> DaemonConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: DaemonConfig) -> dict:
    def selector(rule):
        return {"pid": rule.pid} if rule.pid is not None else {"match": rule.pattern}

    return {
        "interval_ms": cfg.interval_ms,
        "proc_root": cfg.proc_root,
        "sysfs_root": cfg.sysfs_root,
        "targets": list(cfg.targets),
        "pids": list(cfg.pids),
        "importance": [dict(selector(r), weight=r.weight) for r in cfg.importance],
        "pins": [dict(selector(r), cpus=format_cpulist(r.cpus)) for r in cfg.pins],
        "thresholds": {
            "imbalance": cfg.thresholds.imbalance,
            "idle": cfg.thresholds.idle,
            "contention": cfg.thresholds.contention,
        },
        "dry_run": cfg.dry_run,
        "log_format": cfg.log_format,
        "ticks_per_second": cfg.ticks_per_second,
    }


def serialize_config(cfg: DaemonConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"
