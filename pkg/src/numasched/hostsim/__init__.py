"""Deterministic simulated NUMA host for exercising the scheduler end to end."""

from .backend import SimBackend, sim_backend
from .experiment import (
    POLICIES,
    ExperimentResult,
    experiment_document,
    run_all,
    run_policy_experiment,
)
from .model import (
    PARSEC_PROFILES,
    SimHost,
    SimParams,
    SimTask,
    WorkloadProfile,
    builtin_scenarios,
    effective_rate,
    load_scenario,
    read_scenario,
    scenario_from_dict,
    sim_step,
)
from .render import materialize, render_procfs, render_sysfs, write_tree

__all__ = [
    "PARSEC_PROFILES", "POLICIES", "ExperimentResult", "SimBackend", "SimHost", "SimParams",
    "SimTask", "WorkloadProfile", "builtin_scenarios", "effective_rate", "experiment_document", "load_scenario", "materialize", "read_scenario",
    "render_procfs", "render_sysfs", "run_all", "run_policy_experiment", "scenario_from_dict",
    "sim_backend", "sim_step", "write_tree",
]
