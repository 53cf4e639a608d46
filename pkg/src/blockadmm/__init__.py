"""Block-wise asynchronous ADMM for general-form consensus problems."""

from .core import (ConfigError, FilterSchedule, Message, MessageKind, Mode, RunConfig,
                   Topology, TopologyError, build_topology)
from .problems import (LocalDataset, LossOracle, Problem, Regularizer, load_libsvm,
                       make_problem)
from .transport import run, run_async_sim, run_async_threads, run_sync

__all__ = [
    "ConfigError", "FilterSchedule", "LocalDataset", "LossOracle", "Message", "MessageKind",
    "Mode", "Problem", "Regularizer", "RunConfig", "Topology", "TopologyError",
    "build_topology", "load_libsvm", "make_problem", "run", "run_async_sim",
    "run_async_threads", "run_sync",
]
