"""Learned concurrent scheduling of batch analytics queries."""
from .envsim import EnvConfig, EnvSession
from .errors import BQSchedError
from .workload import BatchSet, ExecLog, generate_workload

__version__ = "0.1.0"

__all__ = ["BQSchedError", "BatchSet", "EnvConfig", "EnvSession", "ExecLog", "generate_workload", "__version__"]
