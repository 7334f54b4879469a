"""Architecture configuration and uncontended engine timing models.

The accelerator is a 2D mesh of identical tiles. Each tile couples a
matrix engine (an ``ce_rows x ce_cols`` compute-element array), a vector
engine with a dedicated exponential unit, a DMA engine and a private L1
scratchpad. HBM channels attach to the west and south mesh edges.

This module owns the configuration schema, its validation, the shipped
presets, and the pure cycle-cost models for single engine invocations.
Contention between engines and channels is layered on top by `simcore`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

__all__ = [
    "ArchConfig",
    "MhaLayer",
    "ConfigError",
    "load_config",
    "load_config_file",
    "serialize_config",
    "preset",
    "PRESET_NAMES",
    "gemm_cycles",
    "vector_cycles",
    "hbm_request_time_uncontended",
    "VEC_OP_KINDS",
    "ENV_PREFIX",
]

ENV_PREFIX = "TILESIM_"

VEC_OP_KINDS = ("elementwise", "rowmax", "rowsum", "exp", "scale_accumulate")


class ConfigError(ValueError):
    """Malformed or inconsistent architecture document."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ArchConfig:
    """Full accelerator parameterization. Immutable and hashable."""

    # mesh
    mesh_x: int
    mesh_y: int
    # noc
    noc_link_bytes_per_cycle: int
    l1_to_router_cycles: int
    router_hop_cycles: int
    hw_collectives: bool = False
    hw_reduce_hop_cycles: int = 0
    # hbm
    hbm_channels_west: int = 1
    hbm_channels_south: int = 1
    hbm_channel_bytes_per_cycle: int = 64
    hbm_access_latency_cycles: int = 200
    # tile
    ce_rows: int = 32
    ce_cols: int = 16
    gemm_fill_cycles: int = 64
    vector_elems_per_cycle: int = 64
    exp_elems_per_cycle: int = 16
    l1_bytes: int = 384 * 1024
    l1_bytes_per_cycle: int = 512
    sync_overhead_cycles: int = 50

    def __post_init__(self) -> None:
        positive = (
            "mesh_x", "mesh_y", "noc_link_bytes_per_cycle",
            "hbm_channels_west", "hbm_channels_south",
            "hbm_channel_bytes_per_cycle", "ce_rows", "ce_cols",
            "vector_elems_per_cycle", "exp_elems_per_cycle",
            "l1_bytes", "l1_bytes_per_cycle",
        )
        non_negative = (
            "l1_to_router_cycles", "router_hop_cycles", "hw_reduce_hop_cycles",
            "hbm_access_latency_cycles", "gemm_fill_cycles",
            "sync_overhead_cycles",
        )
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{_field_path(name)}: must be an integer >= 1, got {v!r}")
        for name in non_negative:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{_field_path(name)}: must be an integer >= 0, got {v!r}")
        if not isinstance(self.hw_collectives, bool):
            raise ConfigError(f"{_field_path('hw_collectives')}: must be a boolean")
        if self.hbm_channels_west > self.mesh_y:
            raise ConfigError(
                f"{_field_path('hbm_channels_west')}: {self.hbm_channels_west} "
                f"channels exceed the west edge length mesh_y={self.mesh_y}"
            )
        if self.hbm_channels_south > self.mesh_x:
            raise ConfigError(
                f"{_field_path('hbm_channels_south')}: {self.hbm_channels_south} "
                f"channels exceed the south edge length mesh_x={self.mesh_x}"
            )

    # Derived quantities.

    @property
    def n_tiles(self) -> int:
        return self.mesh_x * self.mesh_y

    @property
    def peak_matrix_flops_per_cycle(self) -> int:
        """Per-tile peak, counting a fused multiply-add as 2 flops."""
        return 2 * self.ce_rows * self.ce_cols

    @property
    def n_hbm_channels(self) -> int:
        return self.hbm_channels_west + self.hbm_channels_south

    @property
    def peak_hbm_bytes_per_cycle(self) -> int:
        return self.n_hbm_channels * self.hbm_channel_bytes_per_cycle

    @property
    def total_l1_bytes(self) -> int:
        return self.n_tiles * self.l1_bytes


@dataclass(frozen=True)
class MhaLayer:
    """Multi-head attention workload descriptor."""

    batch: int
    heads: int
    seq_len: int
    head_dim: int
    bytes_per_elem: int = 2

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"layer.{f.name}: must be an integer >= 1, got {v!r}")

    @property
    def qkvo_tensor_bytes(self) -> int:
        """Bytes of one S x D tensor of one head."""
        return self.seq_len * self.head_dim * self.bytes_per_elem


# Timing models. All pure functions of their arguments.


def gemm_cycles(m: int, k: int, n: int, cfg: ArchConfig) -> int:
    """Matrix engine cycles for an (m x k) @ (k x n) invocation.

    Output-stationary block scan: the array computes one
    ce_rows x ce_cols output block per k cycles, plus a fixed pipeline
    fill. Matches per-tile peak throughput for aligned shapes and
    penalizes slices smaller than the array.
    """
    if m < 1 or k < 1 or n < 1:
        raise ValueError("gemm dimensions must be >= 1")
    blocks = _ceil_div(m, cfg.ce_rows) * _ceil_div(n, cfg.ce_cols)
    return blocks * k + cfg.gemm_fill_cycles


def vector_cycles(op_kind: str, n_elems: int, cfg: ArchConfig) -> int:
    """Vector engine cycles for an elementwise/reduction op over n_elems.

    The exponential op runs on the dedicated exp unit at its own rate;
    everything else uses the general vector rate. Zero elements cost
    zero cycles.
    """
    if op_kind not in VEC_OP_KINDS:
        raise ValueError(f"unknown vector op kind {op_kind!r}")
    if n_elems < 0:
        raise ValueError("n_elems must be >= 0")
    if n_elems == 0:
        return 0
    rate = cfg.exp_elems_per_cycle if op_kind == "exp" else cfg.vector_elems_per_cycle
    return _ceil_div(n_elems, rate)


def hbm_request_time_uncontended(n_bytes: int, cfg: ArchConfig) -> int:
    """Latency-plus-transfer time of a single HBM request on an idle channel."""
    if n_bytes < 0:
        raise ValueError("n_bytes must be >= 0")
    return cfg.hbm_access_latency_cycles + _ceil_div(n_bytes, cfg.hbm_channel_bytes_per_cycle)


# Config document schema: four sections, every ArchConfig field lives in
# exactly one of them. Unknown keys are rejected.

_SECTIONS: dict[str, tuple[str, ...]] = {
    "mesh": ("mesh_x", "mesh_y"),
    "noc": (
        "noc_link_bytes_per_cycle", "l1_to_router_cycles", "router_hop_cycles",
        "hw_collectives", "hw_reduce_hop_cycles",
    ),
    "hbm": (
        "hbm_channels_west", "hbm_channels_south",
        "hbm_channel_bytes_per_cycle", "hbm_access_latency_cycles",
    ),
    "tile": (
        "ce_rows", "ce_cols", "gemm_fill_cycles", "vector_elems_per_cycle",
        "exp_elems_per_cycle", "l1_bytes", "l1_bytes_per_cycle",
        "sync_overhead_cycles",
    ),
}

_FIELD_SECTION = {f: s for s, fs in _SECTIONS.items() for f in fs}

# Fields that may be omitted; they take the dataclass default.
_OPTIONAL_FIELDS = {
    "hw_collectives", "hw_reduce_hop_cycles", "hbm_access_latency_cycles",
    "gemm_fill_cycles", "sync_overhead_cycles",
}

_FIELD_DEFAULTS = {f.name: f.default for f in fields(ArchConfig)}


def _field_path(name: str) -> str:
    section = _FIELD_SECTION.get(name)
    return f"{section}.{name}" if section else name


def load_config(text: str, env: Mapping[str, str] | None = None) -> ArchConfig:
    """Parse and validate an architecture document.

    `env` supplies overrides named ``TILESIM_<SECTION>__<FIELD>`` whose
    values are parsed as YAML scalars; they are applied before
    validation.
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not a valid config document: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping of sections")

    values: dict[str, Any] = {}
    for section, body in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: section must be a mapping")
        for key, value in body.items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
            values[key] = value

    if env is not None:
        values.update(_env_overrides(env))

    missing = [
        f for sec_fields in _SECTIONS.values() for f in sec_fields
        if f not in values and f not in _OPTIONAL_FIELDS
    ]
    if missing:
        raise ConfigError(f"{_field_path(missing[0])}: missing required field")

    return ArchConfig(**values)


def _env_overrides(env: Mapping[str, str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        body = key[len(ENV_PREFIX):]
        if "__" not in body:
            continue
        section, _, fname = body.partition("__")
        section = section.lower()
        fname = fname.lower()
        if section not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section {section!r}")
        if fname not in _SECTIONS[section]:
            raise ConfigError(f"{key}: unknown field {section}.{fname}")
        try:
            out[fname] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: unparsable value {raw!r}") from exc
    return out


def load_config_file(path: str | Path, env: Mapping[str, str] | None = None) -> ArchConfig:
    return load_config(Path(path).read_text(), env=env)


def serialize_config(cfg: ArchConfig) -> str:
    """Render a config back to its document form (load/serialize fixed point)."""
    doc = {
        section: {name: getattr(cfg, name) for name in names}
        for section, names in _SECTIONS.items()
    }
    return yaml.safe_dump(doc, sort_keys=False)


def apply_env(cfg: ArchConfig, env: Mapping[str, str] | None = None) -> ArchConfig:
    """Re-validate a config with environment overrides applied."""
    return load_config(serialize_config(cfg), env=env if env is not None else os.environ)


# Shipped presets. The 1024-tile mesh is the primary evaluation system;
# the coarser fabrics hold peak compute (1024 matrix flops/cycle/tile
# equivalent), aggregate L1 and aggregate HBM bandwidth (2 TB/s at
# 1 GHz) constant while varying tile granularity. The 8x8 fabric has
# only 8 edge positions per side, so it carries 16 double-rate channels
# instead of 32 standard ones.


def _mesh32x32() -> ArchConfig:
    return ArchConfig(
        mesh_x=32, mesh_y=32,
        noc_link_bytes_per_cycle=128, l1_to_router_cycles=10, router_hop_cycles=4,
        hw_collectives=True, hw_reduce_hop_cycles=0,
        hbm_channels_west=16, hbm_channels_south=16,
        hbm_channel_bytes_per_cycle=64, hbm_access_latency_cycles=200,
        ce_rows=32, ce_cols=16, gemm_fill_cycles=64,
        vector_elems_per_cycle=64, exp_elems_per_cycle=16,
        l1_bytes=384 * 1024, l1_bytes_per_cycle=512, sync_overhead_cycles=50,
    )


def _mesh16x16() -> ArchConfig:
    return ArchConfig(
        mesh_x=16, mesh_y=16,
        noc_link_bytes_per_cycle=128, l1_to_router_cycles=10, router_hop_cycles=4,
        hw_collectives=True, hw_reduce_hop_cycles=0,
        hbm_channels_west=16, hbm_channels_south=16,
        hbm_channel_bytes_per_cycle=64, hbm_access_latency_cycles=200,
        ce_rows=64, ce_cols=32, gemm_fill_cycles=64,
        vector_elems_per_cycle=256, exp_elems_per_cycle=64,
        l1_bytes=1526 * 1024, l1_bytes_per_cycle=2048, sync_overhead_cycles=50,
    )


def _mesh8x8() -> ArchConfig:
    return ArchConfig(
        mesh_x=8, mesh_y=8,
        noc_link_bytes_per_cycle=128, l1_to_router_cycles=10, router_hop_cycles=4,
        hw_collectives=True, hw_reduce_hop_cycles=0,
        hbm_channels_west=8, hbm_channels_south=8,
        hbm_channel_bytes_per_cycle=128, hbm_access_latency_cycles=200,
        ce_rows=128, ce_cols=64, gemm_fill_cycles=64,
        vector_elems_per_cycle=1024, exp_elems_per_cycle=256,
        l1_bytes=6144 * 1024, l1_bytes_per_cycle=8192, sync_overhead_cycles=50,
    )


_PRESETS = {
    "mesh32x32": _mesh32x32,
    "mesh16x16": _mesh16x16,
    "mesh8x8": _mesh8x8,
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ArchConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
        ) from None
