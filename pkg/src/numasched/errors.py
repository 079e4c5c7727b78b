"""Exception types shared across the scheduler pipeline."""


class NumaSchedError(Exception):
    pass


class ParseError(NumaSchedError, ValueError):
    """Malformed procfs/sysfs content."""


class TopologyError(NumaSchedError):
    """Missing or inconsistent NUMA topology."""


class ConfigError(NumaSchedError, ValueError):
    """Invalid daemon configuration or scenario document."""


class BackendError(NumaSchedError):
    """A system backend operation failed (usually because the task exited)."""
