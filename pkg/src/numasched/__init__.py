"""NUMA-aware user-space scheduler: monitor, reporter and scheduler pipeline."""

from .config import DaemonConfig, parse_config, serialize_config
from .errors import BackendError, ConfigError, NumaSchedError, ParseError, TopologyError
from .procmon import TaskSnapshot, collect_snapshot, parse_numa_maps, parse_proc_stat
from .reporter import Reporter, ScheduleReport, Thresholds, TriggerReason
from .scheduler import PinRule, PinTable, PlacementPlan, SchedulerConfig, apply_plan, schedule_once
from .topology import NumaNode, NumaTopology, discover_topology, parse_cpulist

__version__ = "0.1.0"

__all__ = [
    "BackendError", "ConfigError", "DaemonConfig", "NumaNode", "NumaSchedError", "NumaTopology",
    "ParseError", "PinRule", "PinTable", "PlacementPlan", "Reporter", "ScheduleReport",
    "SchedulerConfig", "TaskSnapshot", "Thresholds", "TopologyError", "TriggerReason",
    "apply_plan", "collect_snapshot", "discover_topology", "parse_config", "parse_cpulist",
    "parse_numa_maps", "parse_proc_stat", "schedule_once", "serialize_config",
]
