"""Performance simulator and dataflow planner for attention kernels on
tile-based many-PE accelerators."""

from .arch import (
    ArchConfig,
    ConfigError,
    MhaLayer,
    gemm_cycles,
    hbm_request_time_uncontended,
    load_config,
    load_config_file,
    preset,
    serialize_config,
    vector_cycles,
)
from .analytics import fa_io_bytes, flat_io_bytes, summarize, sweep
from .dataflow import (
    DataflowKind,
    GroupShape,
    OnlineSoftmaxState,
    PlanError,
    SlicePlan,
    TensorSlice,
    choose_slice_plan,
    execute_functional,
    plan_dataflow,
    plan_fa2,
    plan_fa3,
    plan_flat,
    reference_attention,
    slice_layout,
)
from .noc import (
    CollectiveSpec,
    TileCoord,
    hw_collective_latency,
    route_xy,
    sw_collective_latency,
    unicast_latency,
)
from .simcore import SimReport, Task, TaskGraph, simulate, validate_graph

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "MhaLayer", "ConfigError", "load_config", "load_config_file",
    "serialize_config", "preset", "gemm_cycles", "vector_cycles",
    "hbm_request_time_uncontended",
    "TileCoord", "CollectiveSpec", "route_xy", "unicast_latency",
    "sw_collective_latency", "hw_collective_latency",
    "Task", "TaskGraph", "SimReport", "simulate", "validate_graph",
    "DataflowKind", "GroupShape", "SlicePlan", "TensorSlice",
    "OnlineSoftmaxState", "PlanError", "choose_slice_plan", "slice_layout",
    "plan_dataflow", "plan_fa2", "plan_fa3", "plan_flat",
    "execute_functional", "reference_attention",
    "fa_io_bytes", "flat_io_bytes", "summarize", "sweep",
    "__version__",
]
