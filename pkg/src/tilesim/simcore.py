"""Deterministic discrete-event execution of per-tile task graphs.

Tasks occupy resources exclusively for their service time:

* ``gemm`` and ``vec_op`` hold their tile's matrix or vector engine.
* ``hbm_load``/``hbm_store`` hold their HBM channel for the transfer
  portion only; the fixed access latency is pipelined, so back-to-back
  requests on one channel serialize at full channel bandwidth.
* ``noc_*`` transfers hold every directed link on their path for the
  whole transfer (circuit-switched approximation of wormhole flow
  control).
* ``sync`` holds nothing and models a fixed scheduling/barrier cost.

Scheduling is work-conserving and fully deterministic: ready tasks are
started in (ready_time, task id) order, and every tie in the event queue
is broken by task id. Identical inputs produce bit-identical reports.

Busy/exposed accounting: engine tasks are charged for their execution
interval; HBM, NoC and sync tasks are charged from the moment their
dependencies complete (queueing for a contended channel or link is part
of the cost the tile experiences). A cycle of a category is "exposed"
on a tile when the tile's matrix engine is idle during it, i.e. the
cost is not hidden behind matrix-engine work.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from .arch import ArchConfig, gemm_cycles, vector_cycles
from .noc import (
    CollectiveSpec,
    TileCoord,
    collective_latency,
    collective_links,
    route_xy,
    span_tiles,
    unicast_latency,
)

__all__ = [
    "Task",
    "TaskGraph",
    "SimReport",
    "GraphError",
    "SimulationError",
    "validate_graph",
    "simulate",
    "CATEGORIES",
]

TASK_KINDS = (
    "hbm_load", "hbm_store", "noc_multicast", "noc_reduce", "noc_unicast",
    "gemm", "vec_op", "sync",
)
CATEGORIES = ("hbm", "inter_tile", "matmul", "softmax", "sync")


class GraphError(ValueError):
    """Task graph failed validation; carries the diagnostics."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class Task:
    """One unit of work bound to a tile.

    Payload fields are kind-specific: transfers carry ``n_bytes`` (and a
    ``channel`` for HBM), gemms carry ``m``/``k``/``n``, vector ops carry
    ``op_kind``/``n_elems``, collectives carry a spec plus the sw/hw
    timing mode, unicasts carry a destination.
    """

    id: int
    tile: TileCoord
    kind: str
    category: str
    deps: tuple[int, ...] = ()
    n_bytes: int = 0
    channel: int | None = None
    m: int = 0
    k: int = 0
    n: int = 0
    op_kind: str | None = None
    n_elems: int = 0
    coll: CollectiveSpec | None = None
    coll_mode: str | None = None
    dst: TileCoord | None = None


@dataclass
class TaskGraph:
    """An immutable-once-built DAG of tasks plus planner metadata."""

    tasks: list[Task] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, kind: str, tile: TileCoord, category: str,
            deps: Iterable[int] = (), **payload) -> int:
        tid = len(self.tasks)
        self.tasks.append(Task(id=tid, tile=TileCoord(*tile), kind=kind,
                               category=category, deps=tuple(deps), **payload))
        return tid

    def __len__(self) -> int:
        return len(self.tasks)

    def hbm_bytes(self) -> int:
        return sum(t.n_bytes for t in self.tasks if t.kind in ("hbm_load", "hbm_store"))

    def dump(self, stream: TextIO) -> None:
        """Human-readable per-tile task listing, stable ordering."""
        by_tile: dict[TileCoord, list[Task]] = {}
        for t in self.tasks:
            by_tile.setdefault(t.tile, []).append(t)
        for tile in sorted(by_tile):
            stream.write(f"tile ({tile.x},{tile.y})\n")
            for t in by_tile[tile]:
                bits = [f"  t{t.id:07d} {t.kind:<13} {t.category:<10}"]
                if t.kind in ("hbm_load", "hbm_store"):
                    bits.append(f"bytes={t.n_bytes} ch={t.channel}")
                elif t.kind == "gemm":
                    bits.append(f"m={t.m} k={t.k} n={t.n}")
                elif t.kind == "vec_op":
                    bits.append(f"{t.op_kind} n={t.n_elems}")
                elif t.coll is not None:
                    bits.append(
                        f"{t.coll.kind} {t.coll.axis} peers={t.coll.n_peers} "
                        f"bytes={t.coll.payload_bytes} mode={t.coll_mode}"
                    )
                bits.append(f"deps={list(t.deps)}")
                stream.write(" ".join(bits) + "\n")


@dataclass
class SimReport:
    """Cycle and byte accounting for one simulation."""

    total_cycles: int
    task_count: int
    busy_cycles: dict[str, int]
    exposed_cycles: dict[str, int]
    per_tile_busy: dict[TileCoord, dict[str, int]]
    per_tile_exposed: dict[TileCoord, dict[str, int]]
    hbm_bytes_read: int
    hbm_bytes_written: int
    hbm_channel_bytes: list[tuple[int, int]]
    ideal_matrix_flops: int
    matrix_engine_utilization: float
    matrix_engine_active_utilization: float
    avg_hbm_bw_utilization: float

    @property
    def hbm_bytes_total(self) -> int:
        return self.hbm_bytes_read + self.hbm_bytes_written

    def as_dict(self, per_tile: bool = False) -> dict:
        d = {
            "total_cycles": self.total_cycles,
            "task_count": self.task_count,
            "busy_cycles": dict(self.busy_cycles),
            "exposed_cycles": dict(self.exposed_cycles),
            "hbm_bytes_read": self.hbm_bytes_read,
            "hbm_bytes_written": self.hbm_bytes_written,
            "hbm_bytes_total": self.hbm_bytes_total,
            "hbm_channel_bytes": [list(c) for c in self.hbm_channel_bytes],
            "ideal_matrix_flops": self.ideal_matrix_flops,
            "matrix_engine_utilization": self.matrix_engine_utilization,
            "matrix_engine_active_utilization": self.matrix_engine_active_utilization,
            "avg_hbm_bw_utilization": self.avg_hbm_bw_utilization,
        }
        if per_tile:
            d["per_tile_busy"] = {
                f"{t.x},{t.y}": dict(cats) for t, cats in sorted(self.per_tile_busy.items())
            }
            d["per_tile_exposed"] = {
                f"{t.x},{t.y}": dict(cats)
                for t, cats in sorted(self.per_tile_exposed.items())
            }
        return d


def validate_graph(graph: TaskGraph, cfg: ArchConfig | None = None) -> list[str]:
    """Structural diagnostics: cycles, dangling deps, out-of-mesh tiles.

    Returns an empty list for a valid graph.
    """
    diags: list[str] = []
    n = len(graph.tasks)
    for t in graph.tasks:
        if t.kind not in TASK_KINDS:
            diags.append(f"task {t.id}: unknown kind {t.kind!r}")
        if t.category not in CATEGORIES:
            diags.append(f"task {t.id}: unknown category {t.category!r}")
        for d in t.deps:
            if not (0 <= d < n):
                diags.append(f"task {t.id}: dangling dependency {d}")
            elif d == t.id:
                diags.append(f"task {t.id}: depends on itself")
        if t.kind in ("hbm_load", "hbm_store") and t.n_bytes < 0:
            diags.append(f"task {t.id}: negative transfer payload")
        if cfg is not None:
            if not (0 <= t.tile.x < cfg.mesh_x and 0 <= t.tile.y < cfg.mesh_y):
                diags.append(
                    f"task {t.id}: tile {tuple(t.tile)} outside "
                    f"{cfg.mesh_x}x{cfg.mesh_y} mesh"
                )
            if t.kind in ("hbm_load", "hbm_store"):
                if t.channel is None or not (0 <= t.channel < cfg.n_hbm_channels):
                    diags.append(f"task {t.id}: references absent HBM channel {t.channel}")

    cycle = _find_cycle(graph)
    if cycle is not None:
        chain = " -> ".join(str(i) for i in cycle)
        diags.append(f"dependency cycle: {chain}")
    return diags


def _find_cycle(graph: TaskGraph) -> list[int] | None:
    n = len(graph.tasks)
    # Kahn peel; whatever remains lies on or feeds a cycle.
    indeg = [0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for t in graph.tasks:
        for d in t.deps:
            if 0 <= d < n:
                indeg[t.id] += 1
                children[d].append(t.id)
    queue = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while queue:
        nxt: list[int] = []
        for u in queue:
            seen += 1
            for c in children[u]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    nxt.append(c)
        queue = nxt
    if seen == n:
        return None
    remaining = {i for i in range(n) if indeg[i] > 0}
    start = min(remaining)
    # Walk unmet deps until a repeat: that repeat closes the witness cycle.
    path = [start]
    pos = {start: 0}
    cur = start
    while True:
        cur = min(d for d in graph.tasks[cur].deps if d in remaining)
        if cur in pos:
            return path[pos[cur]:] + [cur]
        pos[cur] = len(path)
        path.append(cur)


# Waiting-state markers for the engine.
_WAIT_DEPS, _QUEUED, _PARKED, _RUNNING, _DONE = range(5)


def simulate(cfg: ArchConfig, graph: TaskGraph, trace: TextIO | None = None) -> SimReport:
    """Execute the graph to completion and return its cycle accounting."""
    diags = validate_graph(graph, cfg)
    if diags:
        raise GraphError(diags)

    tasks = graph.tasks
    n = len(tasks)
    n_tiles = cfg.n_tiles
    mesh_x = cfg.mesh_x
    chan_bw = cfg.hbm_channel_bytes_per_cycle
    hbm_lat = cfg.hbm_access_latency_cycles

    # Resource id space: [0, T) matrix engines, [T, 2T) vector engines,
    # [2T, 2T+C) HBM channels, then one id per directed mesh link.
    res_vec = n_tiles
    res_chan = 2 * n_tiles
    res_link = res_chan + cfg.n_hbm_channels

    def tile_idx(t: TileCoord) -> int:
        return t.y * mesh_x + t.x

    def link_id(a: TileCoord, b: TileCoord) -> int:
        # 4 directed outgoing links per tile: +x, -x, +y, -y.
        if b.x == a.x + 1:
            d = 0
        elif b.x == a.x - 1:
            d = 1
        elif b.y == a.y + 1:
            d = 2
        else:
            d = 3
        return res_link + 4 * (a.y * mesh_x + a.x) + d

    # Precompute per task: duration, resources, accounting participants.
    dur = [0] * n
    hbm_transfer = [0] * n          # channel-occupancy portion of HBM tasks
    resources: list[tuple[int, ...]] = [()] * n
    participants: list[tuple[int, ...]] = [()] * n
    acc_from_ready = [False] * n    # charge from ready_time instead of start
    flops = [0] * n

    for t in tasks:
        ti = tile_idx(t.tile)
        k = t.kind
        if k == "gemm":
            dur[t.id] = gemm_cycles(t.m, t.k, t.n, cfg)
            resources[t.id] = (ti,)
            participants[t.id] = (ti,)
            flops[t.id] = 2 * t.m * t.k * t.n
        elif k == "vec_op":
            dur[t.id] = vector_cycles(t.op_kind, t.n_elems, cfg)
            resources[t.id] = (res_vec + ti,)
            participants[t.id] = (ti,)
        elif k in ("hbm_load", "hbm_store"):
            hbm_transfer[t.id] = -(-t.n_bytes // chan_bw)
            dur[t.id] = hbm_transfer[t.id] + hbm_lat
            resources[t.id] = (res_chan + t.channel,)
            participants[t.id] = (ti,)
            acc_from_ready[t.id] = True
        elif k in ("noc_multicast", "noc_reduce"):
            dur[t.id] = collective_latency(t.coll, t.coll_mode, cfg)
            resources[t.id] = tuple(link_id(a, b) for a, b in collective_links(t.coll, cfg))
            participants[t.id] = tuple(tile_idx(c) for c in span_tiles(t.coll, cfg))
            acc_from_ready[t.id] = True
        elif k == "noc_unicast":
            links = route_xy(t.tile, t.dst, cfg)
            dur[t.id] = unicast_latency(t.n_bytes, len(links), cfg)
            resources[t.id] = tuple(link_id(a, b) for a, b in links)
            participants[t.id] = (ti, tile_idx(TileCoord(*t.dst)))
            acc_from_ready[t.id] = True
        else:  # sync
            dur[t.id] = cfg.sync_overhead_cycles
            resources[t.id] = ()
            participants[t.id] = (ti,)
            acc_from_ready[t.id] = True

    indeg = [0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for t in tasks:
        indeg[t.id] = len(t.deps)
        for d in t.deps:
            children[d].append(t.id)

    state = [_WAIT_DEPS] * n
    ready_time = [0] * n
    start_time = [0] * n
    end_time = [0] * n

    busy: dict[int, bool] = {}
    waiters: dict[int, list[tuple[int, int]]] = {}

    candidates: list[tuple[int, int]] = []
    for i in range(n):
        if indeg[i] == 0:
            state[i] = _QUEUED
            heapq.heappush(candidates, (0, i))

    # All events at one timestamp drain before the dispatcher runs, so
    # intra-timestamp order only needs to be deterministic.
    EV_COMPLETE, EV_CHAN_FREE = 0, 1
    events: list[tuple[int, int, int, int]] = []
    ev_seq = 0

    done = 0
    now = 0

    cat_idx = {c: i for i, c in enumerate(CATEGORIES)}
    intervals: list[tuple[int, int, int, int]] = []  # (tile, cat, start, end)
    gemm_iv: dict[int, list[tuple[int, int]]] = {}
    chan_read = [0] * cfg.n_hbm_channels
    chan_written = [0] * cfg.n_hbm_channels

    def start_task(tid: int, t_now: int) -> None:
        nonlocal ev_seq
        state[tid] = _RUNNING
        start_time[tid] = t_now
        task = tasks[tid]
        for rid in resources[tid]:
            busy[rid] = True
        if task.kind in ("hbm_load", "hbm_store"):
            tx_end = t_now + hbm_transfer[tid]
            if resources[tid]:
                heapq.heappush(events, (tx_end, EV_CHAN_FREE, tid, ev_seq))
                ev_seq += 1
            heapq.heappush(events, (tx_end + hbm_lat, EV_COMPLETE, tid, ev_seq))
        else:
            heapq.heappush(events, (t_now + dur[tid], EV_COMPLETE, tid, ev_seq))
        ev_seq += 1

    def release(rids: tuple[int, ...]) -> None:
        for rid in rids:
            busy[rid] = False
            w = waiters.get(rid)
            if w:
                while w:
                    item = heapq.heappop(w)
                    tid = item[1]
                    if state[tid] == _PARKED:
                        state[tid] = _QUEUED
                        heapq.heappush(candidates, item)
                    # stale entries for tasks already requeued elsewhere drop here

    def complete(tid: int, t_now: int) -> None:
        nonlocal done
        state[tid] = _DONE
        end_time[tid] = t_now
        done += 1
        task = tasks[tid]
        acc_start = ready_time[tid] if acc_from_ready[tid] else start_time[tid]
        ci = cat_idx[task.category]
        for p in participants[tid]:
            intervals.append((p, ci, acc_start, t_now))
        if task.kind == "gemm":
            gemm_iv.setdefault(participants[tid][0], []).append((start_time[tid], t_now))
        elif task.kind == "hbm_load":
            chan_read[task.channel] += task.n_bytes
        elif task.kind == "hbm_store":
            chan_written[task.channel] += task.n_bytes
        if trace is not None:
            rec = {
                "task": tid, "tile": [task.tile.x, task.tile.y],
                "kind": task.kind, "category": task.category,
                "start": start_time[tid], "end": t_now,
            }
            if task.kind in ("hbm_load", "hbm_store"):
                rec["bytes"] = task.n_bytes
            elif task.kind == "gemm":
                rec["flops"] = flops[tid]
            trace.write(json.dumps(rec, sort_keys=True) + "\n")
        for c in children[tid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready_time[c] = t_now
                state[c] = _QUEUED
                heapq.heappush(candidates, (t_now, c))

    def dispatch(t_now: int) -> None:
        while candidates:
            item = heapq.heappop(candidates)
            tid = item[1]
            if state[tid] != _QUEUED:
                continue
            busy_rids = [r for r in resources[tid] if busy.get(r)]
            if busy_rids:
                state[tid] = _PARKED
                for rid in busy_rids:
                    heapq.heappush(waiters.setdefault(rid, []), item)
            else:
                start_task(tid, t_now)

    dispatch(now)
    while events:
        now = events[0][0]
        while events and events[0][0] == now:
            _, code, tid, _ = heapq.heappop(events)
            if code == EV_CHAN_FREE:
                release(resources[tid])
            else:
                if tasks[tid].kind not in ("hbm_load", "hbm_store"):
                    release(resources[tid])
                complete(tid, now)
        dispatch(now)

    if done != n:
        stuck = [i for i in range(n) if state[i] != _DONE]
        witness = ", ".join(str(i) for i in stuck[:8])
        raise SimulationError(
            f"simulation stalled with {len(stuck)} unfinished tasks "
            f"(first: {witness}); effective resource wait cycle"
        )

    total_cycles = max(end_time) if n else 0
    return _build_report(cfg, graph, total_cycles, intervals, gemm_iv,
                         chan_read, chan_written, flops)


def _merge(ivs: list[tuple[int, int]]) -> list[tuple[int, int]]:
    ivs.sort()
    out: list[tuple[int, int]] = []
    for s, e in ivs:
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            if e > out[-1][1]:
                out[-1] = (out[-1][0], e)
        else:
            out.append((s, e))
    return out


def _outside(ivs: list[tuple[int, int]], mask: list[tuple[int, int]]) -> int:
    """Total length of `ivs` not covered by `mask`; both merged/sorted."""
    total = 0
    j = 0
    for s, e in ivs:
        cur = s
        while j < len(mask) and mask[j][1] <= cur:
            j += 1
        jj = j
        while cur < e:
            if jj >= len(mask) or mask[jj][0] >= e:
                total += e - cur
                break
            ms, me = mask[jj]
            if ms > cur:
                total += ms - cur
            cur = max(cur, me)
            jj += 1
    return total


def _build_report(cfg, graph, total_cycles, intervals, gemm_iv,
                  chan_read, chan_written, flops) -> SimReport:
    mesh_x = cfg.mesh_x
    per_key: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for tile, cat, s, e in intervals:
        per_key.setdefault((tile, cat), []).append((s, e))

    matrix_busy = {t: _merge(ivs) for t, ivs in gemm_iv.items()}

    busy_cycles = {c: 0 for c in CATEGORIES}
    exposed_cycles = {c: 0 for c in CATEGORIES}
    per_tile_busy: dict[TileCoord, dict[str, int]] = {}
    per_tile_exposed: dict[TileCoord, dict[str, int]] = {}

    for (tile, cat), ivs in sorted(per_key.items()):
        merged = _merge(ivs)
        length = sum(e - s for s, e in merged)
        cname = CATEGORIES[cat]
        busy_cycles[cname] += length
        coord = TileCoord(tile % mesh_x, tile // mesh_x)
        per_tile_busy.setdefault(coord, {})[cname] = length
        if cname != "matmul":
            exp = _outside(merged, matrix_busy.get(tile, []))
            exposed_cycles[cname] += exp
            per_tile_exposed.setdefault(coord, {})[cname] = exp

    ideal_flops = sum(flops)
    gemm_busy_total = busy_cycles["matmul"]
    peak = cfg.peak_matrix_flops_per_cycle
    util = ideal_flops / (total_cycles * cfg.n_tiles * peak) if total_cycles else 0.0
    active = ideal_flops / (gemm_busy_total * peak) if gemm_busy_total else 0.0
    total_bytes = sum(chan_read) + sum(chan_written)
    hbm_util = (
        total_bytes / (total_cycles * cfg.peak_hbm_bytes_per_cycle)
        if total_cycles else 0.0
    )

    return SimReport(
        total_cycles=total_cycles,
        task_count=len(graph.tasks),
        busy_cycles=busy_cycles,
        exposed_cycles=exposed_cycles,
        per_tile_busy=per_tile_busy,
        per_tile_exposed=per_tile_exposed,
        hbm_bytes_read=sum(chan_read),
        hbm_bytes_written=sum(chan_written),
        hbm_channel_bytes=list(zip(chan_read, chan_written)),
        ideal_matrix_flops=ideal_flops,
        matrix_engine_utilization=util,
        matrix_engine_active_utilization=active,
        avg_hbm_bw_utilization=hbm_util,
    )
