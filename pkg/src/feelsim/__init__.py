"""Federated edge learning over a wireless uplink with hybrid analog/digital aggregation."""

from .config import ConfigError, RunConfig, dump_config, load_config
from .core import ContractViolation, MaskVector, RngStream
from .orchestrator import RoundReport, Simulation, run, run_tcs_d, run_tcs_h, run_top_k

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "MaskVector",
    "RngStream",
    "RoundReport",
    "RunConfig",
    "Simulation",
    "dump_config",
    "load_config",
    "run",
    "run_tcs_d",
    "run_tcs_h",
    "run_top_k",
]
