"""Closed-form I/O models, report post-processing, and design sweeps.

The two traffic models are exact element counts scaled by the element
width: the per-tile dataflow reads the query once and writes the output
once (the "1" term) and re-reads the transposed-key and value streams
once per row block (the ``S/M`` term); grouping N tiles scales the block
edge by sqrt(N) and divides the streaming term accordingly.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .arch import ArchConfig, MhaLayer
from .dataflow import DataflowKind, GroupShape, PlanError, plan_dataflow
from .simcore import SimReport, simulate

__all__ = [
    "IoModelResult",
    "SweepResult",
    "fa_io_bytes",
    "flat_io_bytes",
    "summarize",
    "sweep",
    "write_csv",
    "CSV_COLUMNS",
    "DEFAULT_SEQ_LENS",
    "DEFAULT_HEAD_DIMS",
    "DEFAULT_GROUP_EDGES",
]

DEFAULT_SEQ_LENS = (512, 1024, 2048, 4096)
DEFAULT_HEAD_DIMS = (64, 128)
DEFAULT_GROUP_EDGES = (4, 8, 16, 32)

CSV_COLUMNS = (
    "arch", "dataflow", "group", "S", "D", "B", "H",
    "cycles", "utilization", "active_utilization",
    "hbm_bytes", "hbm_bw_utilization",
    "exposed_hbm", "exposed_inter_tile", "exposed_softmax", "exposed_sync",
    "error",
)


@dataclass(frozen=True)
class IoModelResult:
    total_bytes: int
    q_bytes: int
    kv_bytes: int
    o_bytes: int
    ratio_vs_baseline: float | None = None


def fa_io_bytes(layer: MhaLayer, block_m: int,
                account_transpose: bool = False) -> IoModelResult:
    """Per-tile dataflow traffic: 2*H*B*D*S*(1 + S/M) elements."""
    if block_m < 1 or layer.seq_len % block_m:
        raise PlanError(f"block size {block_m} does not divide S={layer.seq_len}")
    e = layer.bytes_per_elem
    hbds = layer.heads * layer.batch * layer.head_dim * layer.seq_len
    q = hbds * e
    o = hbds * e
    kv = 2 * hbds * (layer.seq_len // block_m) * e
    extra = 2 * hbds * e if account_transpose else 0
    return IoModelResult(total_bytes=q + kv + o + extra, q_bytes=q, kv_bytes=kv + extra,
                         o_bytes=o)


def flat_io_bytes(layer: MhaLayer, block_m: int, group_tiles: int,
                  account_transpose: bool = False) -> IoModelResult:
    """Grouped dataflow traffic: 2*H*B*D*S*(1 + S/(sqrt(N)*M)) elements.

    Exact for square groups; ``sqrt(N)*M`` must divide the sequence
    length.
    """
    root = math.isqrt(group_tiles)
    if root * root != group_tiles:
        raise PlanError(f"group tile count {group_tiles} is not a perfect square")
    big_block = root * block_m
    if layer.seq_len % big_block:
        raise PlanError(
            f"group block {big_block} (sqrt(N)*M) does not divide S={layer.seq_len}"
        )
    e = layer.bytes_per_elem
    hbds = layer.heads * layer.batch * layer.head_dim * layer.seq_len
    q = hbds * e
    o = hbds * e
    kv = 2 * hbds * (layer.seq_len // big_block) * e
    extra = 2 * hbds * e if account_transpose else 0
    total = q + kv + o + extra
    baseline = fa_io_bytes(layer, block_m, account_transpose).total_bytes
    return IoModelResult(total_bytes=total, q_bytes=q, kv_bytes=kv + extra, o_bytes=o,
                         ratio_vs_baseline=baseline / total)


def mha_flops(layer: MhaLayer) -> int:
    """Ideal flop count of the two attention gemms: 4*B*H*S^2*D."""
    return 4 * layer.batch * layer.heads * layer.seq_len ** 2 * layer.head_dim


def summarize(report: SimReport, cfg: ArchConfig, layer: MhaLayer) -> dict:
    """Utilization and breakdown metrics in the headline definitions.

    Utilization is ideal attention flops over peak flops for the whole
    run; active utilization divides by matrix-engine busy time only.
    """
    cycles = report.total_cycles
    flops = mha_flops(layer)
    peak = cfg.peak_matrix_flops_per_cycle
    busy = report.busy_cycles.get("matmul", 0)
    util = flops / (cycles * cfg.n_tiles * peak) if cycles else 0.0
    active = flops / (busy * peak) if busy else 0.0
    hbm_bytes = report.hbm_bytes_total
    hbm_util = hbm_bytes / (cycles * cfg.peak_hbm_bytes_per_cycle) if cycles else 0.0
    return {
        "cycles": cycles,
        "utilization": util,
        "active_utilization": active,
        "mha_flops": flops,
        "hbm_bytes": hbm_bytes,
        "hbm_bytes_read": report.hbm_bytes_read,
        "hbm_bytes_written": report.hbm_bytes_written,
        "hbm_bw_utilization": hbm_util,
        "busy_cycles": dict(report.busy_cycles),
        "exposed_cycles": dict(report.exposed_cycles),
    }


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)
    # (arch, S, D, B, H, dataflow) -> row index of the best group per cell
    best: dict[tuple, int] = field(default_factory=dict)


def _point_key(point: tuple) -> tuple:
    arch_name, _cfg, layer, kind, group = point
    return (arch_name, layer.seq_len, layer.head_dim, layer.batch, layer.heads,
            kind.value, group.g_x * group.g_y, group.g_x)


def _run_point(point: tuple) -> dict:
    arch_name, cfg, layer, kind, group = point
    row = {
        "arch": arch_name,
        "dataflow": kind.value,
        "group": f"{group.g_x}x{group.g_y}",
        "S": layer.seq_len,
        "D": layer.head_dim,
        "B": layer.batch,
        "H": layer.heads,
        "cycles": "", "utilization": "", "active_utilization": "",
        "hbm_bytes": "", "hbm_bw_utilization": "",
        "exposed_hbm": "", "exposed_inter_tile": "",
        "exposed_softmax": "", "exposed_sync": "",
        "error": "",
    }
    try:
        graph = plan_dataflow(layer, cfg, kind, group=group)
        report = simulate(cfg, graph)
        metrics = summarize(report, cfg, layer)
    except (PlanError, ValueError) as exc:
        row["error"] = str(exc)
        return row
    row.update({
        "cycles": metrics["cycles"],
        "utilization": round(metrics["utilization"], 6),
        "active_utilization": round(metrics["active_utilization"], 6),
        "hbm_bytes": metrics["hbm_bytes"],
        "hbm_bw_utilization": round(metrics["hbm_bw_utilization"], 6),
        "exposed_hbm": metrics["exposed_cycles"].get("hbm", 0),
        "exposed_inter_tile": metrics["exposed_cycles"].get("inter_tile", 0),
        "exposed_softmax": metrics["exposed_cycles"].get("softmax", 0),
        "exposed_sync": metrics["exposed_cycles"].get("sync", 0),
    })
    return row


def sweep(cfgs: dict[str, ArchConfig], layers: list[MhaLayer],
          kinds: list[DataflowKind], groups: list[GroupShape],
          parallel: int = 0) -> SweepResult:
    """Simulate every (arch, layer, dataflow, group) point.

    Per-tile dataflows collapse all groups onto 1x1, deduplicated.
    Infeasible points keep their planner error in the result row. The
    row order (and therefore the CSV) is independent of `parallel`.
    """
    points = []
    seen = set()
    for arch_name in sorted(cfgs):
        cfg = cfgs[arch_name]
        for layer in layers:
            for kind in kinds:
                kind_groups = groups if kind.grouped else [GroupShape(1, 1)]
                for group in kind_groups:
                    point = (arch_name, cfg, layer, kind, group)
                    key = _point_key(point)
                    if key in seen:
                        continue
                    seen.add(key)
                    points.append(point)
    points.sort(key=_point_key)
    if not points:
        raise ValueError("no sweep points")

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_run_point, points))
    else:
        rows = [_run_point(p) for p in points]

    result = SweepResult(rows=rows)
    result.best = select_best(rows)
    return result


def select_best(rows: list[dict]) -> dict[tuple, int]:
    """Best group per (arch, layer, dataflow) cell: highest utilization,
    ties broken toward the smaller (cheaper) group."""
    best: dict[tuple, int] = {}
    for i, row in enumerate(rows):
        if row["error"]:
            continue
        cell = (row["arch"], row["S"], row["D"], row["B"], row["H"], row["dataflow"])
        cur = best.get(cell)
        if cur is None:
            best[cell] = i
            continue
        a = (row["utilization"], -_group_tiles(row["group"]))
        b = (rows[cur]["utilization"], -_group_tiles(rows[cur]["group"]))
        if a > b:
            best[cell] = i
    return best


def _group_tiles(text: str) -> int:
    gx, _, gy = text.partition("x")
    return int(gx) * int(gy)


def write_csv(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow(row)
