"""Compile attention layers into per-tile task graphs, and execute the
same schedules functionally on real tensors.

Five dataflow variants share one parametric plan builder:

* ``fa2``: each tile independently processes whole attention blocks of
  its assigned (batch, head, row-block) units, streaming key/value
  blocks from HBM with double buffering. No inter-tile traffic.
* ``fa3``: fa2 restructured so each tile interleaves two independent
  unit streams; one stream's matrix work overlaps the other's data
  movement and softmax, at the price of extra scheduling syncs and of
  halving the per-stream L1 budget.
* ``flat``: a group of tiles processes one much larger block
  cooperatively. West-edge tiles load and row-multicast query slices;
  south-edge tiles load and column-multicast transposed-key and value
  slices; row-wise max/sum reductions knit the online softmax together;
  output slices are row-reduced back to the west edge and stored.
  Collectives are timed as software unicast chains.
* ``flatcoll``: flat with hardware (in-flight) collectives.
* ``flatasyn``: flatcoll plus the two-stream interleave of fa3.

A group of 1x1 tiles degenerates flat into exactly the fa2 task
structure, which keeps the two accounting paths mutually checkable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .arch import ArchConfig, MhaLayer
from .noc import CollectiveSpec, TileCoord
from .simcore import TaskGraph

__all__ = [
    "DataflowKind",
    "GroupShape",
    "SlicePlan",
    "TensorSlice",
    "OnlineSoftmaxState",
    "PlanError",
    "choose_slice_plan",
    "slice_layout",
    "plan_fa2",
    "plan_fa3",
    "plan_flat",
    "plan_dataflow",
    "reference_attention",
    "execute_functional",
]

log = logging.getLogger(__name__)


class PlanError(ValueError):
    """No feasible mapping of the layer onto the configuration."""


class DataflowKind(str, Enum):
    FA2 = "fa2"
    FA3 = "fa3"
    FLAT = "flat"
    FLAT_COLL = "flatcoll"
    FLAT_ASYN = "flatasyn"

    @property
    def streams(self) -> int:
        """Concurrent unit streams per tile (fa3) or group (flatasyn)."""
        return 2 if self in (DataflowKind.FA3, DataflowKind.FLAT_ASYN) else 1

    @property
    def grouped(self) -> bool:
        return self in (DataflowKind.FLAT, DataflowKind.FLAT_COLL, DataflowKind.FLAT_ASYN)


@dataclass(frozen=True)
class GroupShape:
    g_x: int
    g_y: int

    def __post_init__(self) -> None:
        if self.g_x < 1 or self.g_y < 1:
            raise PlanError(f"group shape {self.g_x}x{self.g_y} must be >= 1x1")

    @property
    def n_tiles(self) -> int:
        return self.g_x * self.g_y

    def __str__(self) -> str:
        return f"{self.g_x}x{self.g_y}"


@dataclass(frozen=True)
class TensorSlice:
    """One tile's fragment of a unit's tensors, in source-index space.

    ``q``/``k_t``/``v``/``o`` slices index (sequence, head-dim) space;
    ``scores`` slices index (sequence, sequence) space. ``owner`` is the
    tile's local coordinate within its group.
    """

    role: str  # q | k_t | v | o | scores
    owner: tuple[int, int]
    row0: int
    rows: int
    col0: int
    cols: int
    elem_bytes: int = 2

    @property
    def n_bytes(self) -> int:
        return self.rows * self.cols * self.elem_bytes


@dataclass(frozen=True)
class SlicePlan:
    """Blocking of one attention unit onto a tile group.

    A unit covers a ``b_r x b_c`` block of the score matrix; every tile
    owns a ``slice_r x slice_c`` fragment of it. ``streams`` counts
    concurrent unit streams sharing the L1 (each with its own buffers),
    ``buffering`` says whether key/value slices are double-buffered
    within a stream.
    """

    b_r: int
    b_c: int
    slice_r: int
    slice_c: int
    l1_footprint_bytes: int
    buffering: str  # "single" | "double"
    streams: int

    @property
    def k_buf(self) -> int:
        return 2 if self.buffering == "double" else 1


def _slice_footprint_bytes(s: int, head_dim: int, elem_bytes: int,
                           k_buf: int, streams: int) -> int:
    # Per stream: Q (s*D) + O (s*D) + K^T and V slices (k_buf copies of
    # s*D each) + score/probability slice (s*s) + running statistics
    # (max, denominator, their updates: 4 values per row).
    per_stream = s * head_dim * (2 + 2 * k_buf) + s * s + 4 * s
    return streams * elem_bytes * per_stream


def _validate_group(cfg: ArchConfig, group: GroupShape) -> None:
    if cfg.mesh_x % group.g_x or cfg.mesh_y % group.g_y:
        raise PlanError(
            f"group {group} does not evenly tile the {cfg.mesh_x}x{cfg.mesh_y} mesh"
        )


def choose_slice_plan(layer: MhaLayer, cfg: ArchConfig, group: GroupShape,
                      kind: DataflowKind) -> SlicePlan:
    """Pick the per-tile slice edge for a square block on this group.

    The slice is the largest square ``s`` such that the working set fits
    in L1, ``s * g_y`` and ``s * g_x`` divide the sequence length, and
    the layer still yields enough (batch, head, row-block) units to keep
    every group (and stream) busy. Slices aligned to the larger matrix
    array dimension are preferred; divisibility or parallelism may force
    smaller ones (the over-flattening regime), but an L1 capacity that
    cannot hold even one array-aligned slice is an error.
    """
    _validate_group(cfg, group)
    s_len = layer.seq_len
    streams = kind.streams
    k_buf = 1 if streams == 2 else 2

    candidates = [
        s for s in range(1, s_len // max(group.g_x, group.g_y) + 1)
        if s_len % (s * group.g_y) == 0 and s_len % (s * group.g_x) == 0
    ]
    if not candidates:
        raise PlanError(
            f"sequence length {s_len} is not divisible by any block on group {group}"
        )

    def footprint(s: int) -> int:
        return _slice_footprint_bytes(s, layer.head_dim, layer.bytes_per_elem,
                                      k_buf, streams)

    pool = [s for s in candidates if footprint(s) <= cfg.l1_bytes]
    if not pool:
        raise PlanError(
            f"L1 capacity binds: the smallest slice ({candidates[0]}) needs "
            f"{footprint(candidates[0])} B of the {cfg.l1_bytes} B L1"
        )

    n_groups = (cfg.mesh_x // group.g_x) * (cfg.mesh_y // group.g_y)

    def units(s: int) -> int:
        return layer.batch * layer.heads * (s_len // (s * group.g_y))

    fillpool = [s for s in pool if units(s) >= streams * n_groups]
    ce = max(cfg.ce_rows, cfg.ce_cols)
    aligned_fill = [s for s in fillpool if s % ce == 0]
    aligned_pool = [s for s in pool if s % ce == 0]

    if aligned_fill:
        s = max(aligned_fill)
    elif fillpool and aligned_pool:
        # Parallelizing over all groups forces slices below array alignment.
        s = max(fillpool)
    elif not fillpool and aligned_pool:
        # Too few units to fill the mesh at any size; keep slices large.
        s = max(aligned_pool)
    elif max(candidates) < ce:
        # Sequence/group divisibility caps the slice below the array.
        s = max(fillpool or pool)
    else:
        raise PlanError(
            f"L1 capacity binds: no slice aligned to the {ce}-wide matrix "
            f"array fits in {cfg.l1_bytes} B"
        )

    return SlicePlan(
        b_r=s * group.g_y,
        b_c=s * group.g_x,
        slice_r=s,
        slice_c=s,
        l1_footprint_bytes=footprint(s),
        buffering="double" if k_buf == 2 else "single",
        streams=streams,
    )


def slice_layout(layer: MhaLayer, plan: SlicePlan, group: GroupShape,
                 row_block: int, iteration: int) -> list[TensorSlice]:
    """Enumerate every tile's tensor slices for one unit iteration.

    Bounds-checked against the layer; extents follow the slice plan.
    West-edge tiles (local x = 0) own the q and o slices, south-edge
    tiles (local y = 0) own the streamed k_t and v slices.
    """
    s_len, d = layer.seq_len, layer.head_dim
    e = layer.bytes_per_elem
    r0 = row_block * plan.b_r
    c0 = iteration * plan.b_c
    if not (0 <= r0 and r0 + plan.b_r <= s_len and 0 <= c0 and c0 + plan.b_c <= s_len):
        raise PlanError(f"block ({row_block}, {iteration}) outside the sequence")
    out: list[TensorSlice] = []
    for ly in range(group.g_y):
        row = r0 + ly * plan.slice_r
        out.append(TensorSlice("q", (0, ly), row, plan.slice_r, 0, d, e))
        out.append(TensorSlice("o", (0, ly), row, plan.slice_r, 0, d, e))
    for lx in range(group.g_x):
        col = c0 + lx * plan.slice_c
        out.append(TensorSlice("k_t", (lx, 0), col, plan.slice_c, 0, d, e))
        out.append(TensorSlice("v", (lx, 0), col, plan.slice_c, 0, d, e))
    for ly in range(group.g_y):
        for lx in range(group.g_x):
            out.append(TensorSlice(
                "scores", (lx, ly),
                r0 + ly * plan.slice_r, plan.slice_r,
                c0 + lx * plan.slice_c, plan.slice_c, e,
            ))
    return out


def predicted_hbm_bytes(layer: MhaLayer, b_r: int, account_transpose: bool = False) -> int:
    """Analytic HBM traffic of a plan with row/column block size b_r."""
    e = layer.bytes_per_elem
    qo = 2 * layer.batch * layer.heads * layer.seq_len * layer.head_dim * e
    kv = 2 * layer.batch * layer.heads * layer.head_dim * e * (layer.seq_len ** 2 // b_r)
    extra = qo if account_transpose else 0
    return qo + kv + extra


class _Builder:
    """Emits the task graph for a list of units on one configuration."""

    def __init__(self, layer: MhaLayer, cfg: ArchConfig, kind: DataflowKind,
                 group: GroupShape, plan: SlicePlan, collectives: str,
                 account_transpose: bool):
        self.layer = layer
        self.cfg = cfg
        self.kind = kind
        self.group = group
        self.plan = plan
        self.mode = collectives
        self.account_transpose = account_transpose
        self.graph = TaskGraph()
        self._chan_counter: dict[TileCoord, int] = {}
        self.sync_count = 0

    def _chan(self, tile: TileCoord) -> int:
        # Stripe each tile's requests across all channels, offset by the
        # tile position so simultaneous first requests spread out.
        c = self._chan_counter.get(tile, 0)
        self._chan_counter[tile] = c + 1
        return (tile.x + tile.y + c) % self.cfg.n_hbm_channels

    def _sync(self, tile: TileCoord, deps) -> int:
        self.sync_count += 1
        return self.graph.add("sync", tile, "sync", deps)

    def build_unit(self, origin: TileCoord, chain_deps: list[int]) -> list[int]:
        """Emit one (batch, head, row-block) unit; returns terminal task ids."""
        g = self.graph
        gx, gy = self.group.g_x, self.group.g_y
        s = self.plan.slice_r
        d = self.layer.head_dim
        e = self.layer.bytes_per_elem
        slice_bytes = s * d * e
        stat_bytes = s * e
        n_iter = self.layer.seq_len // self.plan.b_c
        k_buf = self.plan.k_buf
        two_streams = self.kind.streams == 2
        ox, oy = origin

        def tile(lx: int, ly: int) -> TileCoord:
            return TileCoord(ox + lx, oy + ly)

        # Q: west edge loads, then row-wise multicast.
        q_ready: list[int] = []
        for ly in range(gy):
            w = tile(0, ly)
            load = g.add("hbm_load", w, "hbm", chain_deps,
                         n_bytes=slice_bytes, channel=self._chan(w))
            if gx > 1:
                spec = CollectiveSpec("multicast", "row", w, gx - 1, slice_bytes, e)
                load = g.add("noc_multicast", w, "inter_tile", [load],
                             coll=spec, coll_mode=self.mode)
            q_ready.append(load)

        # Rolling per-tile state across inner iterations.
        gemm_s_hist: dict[tuple[int, int], list[int]] = {}
        gemm_pv_hist: dict[tuple[int, int], list[int]] = {}
        k_src_hist: dict[int, list[int]] = {lx: [] for lx in range(gx)}
        v_src_hist: dict[int, list[int]] = {lx: [] for lx in range(gx)}
        last_l_upd: dict[tuple[int, int], int] = {}
        last_pv: dict[tuple[int, int], int] = {}

        for j in range(n_iter):
            # K^T/V: south edge loads, then column-wise multicast. A slot
            # is reloaded once its previous occupant has been sent (the
            # source copy) and consumed by every gemm in the column.
            k_ready: list[int] = []
            v_ready: list[int] = []
            reuse = j - k_buf
            for lx in range(gx):
                south = tile(lx, 0)
                if gy > 1:
                    k_load_deps = [k_src_hist[lx][reuse]] if reuse >= 0 else chain_deps
                    v_load_deps = [v_src_hist[lx][reuse]] if reuse >= 0 else chain_deps
                else:
                    k_load_deps = [gemm_s_hist[(lx, 0)][reuse]] if reuse >= 0 else chain_deps
                    v_load_deps = [gemm_pv_hist[(lx, 0)][reuse]] if reuse >= 0 else chain_deps
                k_load = g.add("hbm_load", south, "hbm", k_load_deps,
                               n_bytes=slice_bytes, channel=self._chan(south))
                v_load = g.add("hbm_load", south, "hbm", v_load_deps,
                               n_bytes=slice_bytes, channel=self._chan(south))
                if gy > 1:
                    consumers_s = [gemm_s_hist[(lx, ly)][reuse] for ly in range(gy)] \
                        if reuse >= 0 else []
                    consumers_pv = [gemm_pv_hist[(lx, ly)][reuse] for ly in range(gy)] \
                        if reuse >= 0 else []
                    spec = CollectiveSpec("multicast", "column", south, gy - 1,
                                          slice_bytes, e)
                    k_id = g.add("noc_multicast", south, "inter_tile",
                                 [k_load] + consumers_s, coll=spec, coll_mode=self.mode)
                    v_id = g.add("noc_multicast", south, "inter_tile",
                                 [v_load] + consumers_pv, coll=spec, coll_mode=self.mode)
                else:
                    k_id, v_id = k_load, v_load
                k_src_hist[lx].append(k_id)
                v_src_hist[lx].append(v_id)
                k_ready.append(k_id)
                v_ready.append(v_id)

            # Score gemms and local row maxima.
            rowmax_ids: dict[tuple[int, int], int] = {}
            for ly in range(gy):
                for lx in range(gx):
                    t = tile(lx, ly)
                    key = (lx, ly)
                    deps = [q_ready[ly], k_ready[lx]]
                    prev_pv = last_pv.get(key)
                    if prev_pv is not None:
                        deps.append(prev_pv)  # score buffer still holds previous P
                    if two_streams:
                        sdep = [prev_pv] if prev_pv is not None else [q_ready[ly]]
                        deps.append(self._sync(t, sdep))
                    gemm_s = g.add("gemm", t, "matmul", deps, m=s, k=d, n=s)
                    gemm_s_hist.setdefault(key, []).append(gemm_s)
                    rowmax_ids[key] = g.add("vec_op", t, "softmax", [gemm_s],
                                            op_kind="rowmax", n_elems=s * s)

            # Row-wise max reduce + broadcast of the block maxima.
            max_ready: dict[int, int] = {}
            if gx > 1:
                for ly in range(gy):
                    w = tile(0, ly)
                    barrier = self._sync(w, [rowmax_ids[(lx, ly)] for lx in range(gx)])
                    spec = CollectiveSpec("reduce_max", "row", w, gx - 1, stat_bytes, e)
                    red = g.add("noc_reduce", w, "inter_tile", [barrier],
                                coll=spec, coll_mode=self.mode)
                    mspec = CollectiveSpec("multicast", "row", w, gx - 1, stat_bytes, e)
                    max_ready[ly] = g.add("noc_multicast", w, "inter_tile", [red],
                                          coll=mspec, coll_mode=self.mode)

            # Per-tile: merge with running max, exponentiate, partial sums.
            rowsum_ids: dict[tuple[int, int], int] = {}
            m_comb_ids: dict[tuple[int, int], int] = {}
            exp_ids: dict[tuple[int, int], int] = {}
            for ly in range(gy):
                for lx in range(gx):
                    t = tile(lx, ly)
                    key = (lx, ly)
                    mdep = max_ready[ly] if gx > 1 else rowmax_ids[key]
                    m_comb = g.add("vec_op", t, "softmax", [mdep],
                                   op_kind="elementwise", n_elems=s)
                    m_comb_ids[key] = m_comb
                    exp_ids[key] = g.add("vec_op", t, "softmax", [m_comb],
                                         op_kind="exp", n_elems=s * s)
                    rowsum_ids[key] = g.add("vec_op", t, "softmax", [exp_ids[key]],
                                            op_kind="rowsum", n_elems=s * s)

            # Row-wise sum reduce + broadcast of the block denominators.
            sum_ready: dict[int, int] = {}
            if gx > 1:
                for ly in range(gy):
                    w = tile(0, ly)
                    barrier = self._sync(w, [rowsum_ids[(lx, ly)] for lx in range(gx)])
                    spec = CollectiveSpec("reduce_sum", "row", w, gx - 1, stat_bytes, e)
                    red = g.add("noc_reduce", w, "inter_tile", [barrier],
                                coll=spec, coll_mode=self.mode)
                    mspec = CollectiveSpec("multicast", "row", w, gx - 1, stat_bytes, e)
                    sum_ready[ly] = g.add("noc_multicast", w, "inter_tile", [red],
                                          coll=mspec, coll_mode=self.mode)

            # Per-tile: denominator update, output rescale, PV gemm.
            for ly in range(gy):
                for lx in range(gx):
                    t = tile(lx, ly)
                    key = (lx, ly)
                    sdep = sum_ready[ly] if gx > 1 else rowsum_ids[key]
                    l_deps = [sdep, m_comb_ids[key]]
                    if key in last_l_upd:
                        l_deps.append(last_l_upd[key])
                    l_upd = g.add("vec_op", t, "softmax", l_deps,
                                  op_kind="scale_accumulate", n_elems=s)
                    last_l_upd[key] = l_upd
                    resc_deps = [m_comb_ids[key]]
                    if last_pv.get(key) is not None:
                        resc_deps.append(last_pv[key])
                    resc = g.add("vec_op", t, "softmax", resc_deps,
                                 op_kind="scale_accumulate", n_elems=s * d)
                    pv = g.add("gemm", t, "matmul",
                               [exp_ids[key], resc, v_ready[lx]], m=s, k=s, n=d)
                    gemm_pv_hist.setdefault(key, []).append(pv)
                    last_pv[key] = pv

        # Exit: normalize, row-reduce O to the west edge, store.
        terminals: list[int] = []
        for ly in range(gy):
            norm_ids = []
            for lx in range(gx):
                t = tile(lx, ly)
                key = (lx, ly)
                norm_ids.append(
                    g.add("vec_op", t, "softmax",
                          [last_pv[key], last_l_upd[key]],
                          op_kind="elementwise", n_elems=s * d)
                )
            w = tile(0, ly)
            store_dep = norm_ids[0]
            if gx > 1:
                spec = CollectiveSpec("reduce_sum", "row", w, gx - 1, slice_bytes, e)
                store_dep = g.add("noc_reduce", w, "inter_tile", norm_ids,
                                  coll=spec, coll_mode=self.mode)
            terminals.append(
                g.add("hbm_store", w, "hbm", [store_dep],
                      n_bytes=slice_bytes, channel=self._chan(w))
            )
        return terminals


def plan_dataflow(layer: MhaLayer, cfg: ArchConfig, kind: DataflowKind,
                  group: GroupShape | None = None, collectives: str | None = None,
                  account_transpose: bool = False) -> TaskGraph:
    """Compile the layer into a task graph for the given dataflow."""
    if kind in (DataflowKind.FA2, DataflowKind.FA3):
        if group is not None and (group.g_x != 1 or group.g_y != 1):
            raise PlanError(f"{kind.value} runs per tile; group must be 1x1")
        group = GroupShape(1, 1)
    elif group is None:
        group = GroupShape(cfg.mesh_x, cfg.mesh_y)
    _validate_group(cfg, group)

    if collectives is None:
        collectives = "sw" if kind == DataflowKind.FLAT else "hw"
    if collectives not in ("sw", "hw"):
        raise PlanError(f"unknown collective mode {collectives!r}")
    if kind in (DataflowKind.FLAT_COLL, DataflowKind.FLAT_ASYN) and collectives != "hw":
        raise PlanError(f"{kind.value} is defined with hardware collectives")
    needs_hw = kind.grouped and collectives == "hw" and group.n_tiles > 1
    if needs_hw and not cfg.hw_collectives:
        raise PlanError(
            "hardware collectives requested but not available in this configuration"
        )

    plan = choose_slice_plan(layer, cfg, group, kind)
    units = [
        (b, r, h)
        for b in range(layer.batch)
        for r in range(layer.seq_len // plan.b_r)
        for h in range(layer.heads)
    ]

    if kind == DataflowKind.FA3 and len(units) < 2 * cfg.n_tiles:
        log.warning(
            "fa3 needs two streams per tile but only %d units exist for %d tiles; "
            "falling back to fa2", len(units), cfg.n_tiles,
        )
        return plan_dataflow(layer, cfg, DataflowKind.FA2,
                             account_transpose=account_transpose)
    if kind == DataflowKind.FLAT_ASYN:
        n_groups = (cfg.mesh_x // group.g_x) * (cfg.mesh_y // group.g_y)
        if len(units) < 2 * n_groups:
            log.warning(
                "flatasyn needs two streams per group but only %d units exist for "
                "%d groups; falling back to flatcoll", len(units), n_groups,
            )
            return plan_dataflow(layer, cfg, DataflowKind.FLAT_COLL, group=group,
                                 account_transpose=account_transpose)

    b = _Builder(layer, cfg, kind, group, plan, collectives, account_transpose)
    n_gx = cfg.mesh_x // group.g_x
    n_gy = cfg.mesh_y // group.g_y
    n_groups = n_gx * n_gy
    streams = kind.streams

    if account_transpose:
        # One extra S x D read plus write per (batch, head): the cost of
        # materializing the transposed key matrix in HBM.
        kt_bytes = layer.seq_len * layer.head_dim * layer.bytes_per_elem
        for bi in range(layer.batch):
            for h in range(layer.heads):
                idx = bi * layer.heads + h
                gidx = idx % n_groups
                origin = TileCoord((gidx % n_gx) * group.g_x,
                                   (gidx // n_gx) * group.g_y)
                load = b.graph.add("hbm_load", origin, "hbm", (),
                                   n_bytes=kt_bytes, channel=b._chan(origin))
                b.graph.add("hbm_store", origin, "hbm", [load],
                            n_bytes=kt_bytes, channel=b._chan(origin))

    chains: dict[tuple[int, int], list[int]] = {}
    for i, _unit in enumerate(units):
        gidx = i % n_groups
        slot = (i // n_groups) % streams
        origin = TileCoord((gidx % n_gx) * group.g_x, (gidx // n_gx) * group.g_y)
        prev = chains.get((gidx, slot), [])
        chains[(gidx, slot)] = b.build_unit(origin, prev)

    g = b.graph
    g.meta = {
        "kind": kind.value,
        "collectives": collectives,
        "group": (group.g_x, group.g_y),
        "slice_plan": plan,
        "layer": layer,
        "n_units": len(units),
        "streams": streams,
        "sync_tasks": b.sync_count,
        "predicted_hbm_bytes": predicted_hbm_bytes(layer, plan.b_r, account_transpose),
        "account_transpose": account_transpose,
    }
    return g


def plan_fa2(layer: MhaLayer, cfg: ArchConfig,
             account_transpose: bool = False) -> TaskGraph:
    return plan_dataflow(layer, cfg, DataflowKind.FA2,
                         account_transpose=account_transpose)


def plan_fa3(layer: MhaLayer, cfg: ArchConfig,
             account_transpose: bool = False) -> TaskGraph:
    return plan_dataflow(layer, cfg, DataflowKind.FA3,
                         account_transpose=account_transpose)


def plan_flat(layer: MhaLayer, cfg: ArchConfig, group: GroupShape,
              collectives: str = "sw", asyn: bool = False,
              account_transpose: bool = False) -> TaskGraph:
    if asyn:
        kind = DataflowKind.FLAT_ASYN
    elif collectives == "hw":
        kind = DataflowKind.FLAT_COLL
    else:
        kind = DataflowKind.FLAT
    return plan_dataflow(layer, cfg, kind, group=group, collectives=collectives,
                         account_transpose=account_transpose)


# Functional execution: the same block/slice traversal on real tensors.


def reference_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        scale: float | None = None) -> np.ndarray:
    """Two-pass attention oracle over the full score matrix, float64."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or q.shape != k.shape or v.shape[0] != k.shape[0]:
        raise ValueError("expected Q, K, V of shapes (S, D), (S, D), (S, D)")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    scores = scale * (q @ k.T)
    m = scores.max(axis=1, keepdims=True)
    p = np.exp(scores - m)
    return (p / p.sum(axis=1, keepdims=True)) @ v


def softmax_rows(q: np.ndarray, k: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Row-stochastic attention weights, for normalization checks."""
    q, k = (np.asarray(a, dtype=np.float64) for a in (q, k))
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    scores = scale * (q @ k.T)
    p = np.exp(scores - scores.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def execute_functional(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                       kind: DataflowKind, cfg: ArchConfig,
                       group: GroupShape | None = None,
                       scale: float | None = None,
                       check_state: bool = False) -> np.ndarray:
    """Run the variant's exact block/slice schedule on real matrices.

    Uses the same slice planner as the timed path, so the traversal
    (row blocks outer, column blocks inner, slice-chain reductions in
    ascending column order) matches the plan that would be simulated.
    With ``check_state`` the running row maximum is asserted against the
    true maximum of all processed scores after every inner iteration.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape or v.shape != k.shape:
        raise ValueError("expected Q, K, V of identical (S, D) shapes")
    s_len, d = q.shape
    if kind in (DataflowKind.FA2, DataflowKind.FA3):
        group = GroupShape(1, 1)
    elif group is None:
        group = GroupShape(cfg.mesh_x, cfg.mesh_y)
    layer = MhaLayer(batch=1, heads=1, seq_len=s_len, head_dim=d)
    plan = choose_slice_plan(layer, cfg, group, kind)
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    return _blocked_attention(q, k, v, layer, plan, group, scale, check_state)


@dataclass
class OnlineSoftmaxState:
    """Running softmax statistics of one row block.

    ``m`` holds the maximum score seen so far per output row, ``l`` the
    softmax denominator under that maximum, and ``acc`` the unnormalized
    output accumulators, one per column-slice owner, summed only at
    loop exit (the row-wise output reduction).
    """

    m: np.ndarray
    l: np.ndarray
    acc: list[np.ndarray]

    @classmethod
    def fresh(cls, rows: int, dim: int, n_col_slices: int) -> "OnlineSoftmaxState":
        return cls(
            m=np.full(rows, -np.inf),
            l=np.zeros(rows),
            acc=[np.zeros((rows, dim)) for _ in range(n_col_slices)],
        )

    def absorb(self, scores: list[np.ndarray], v_slices: list[np.ndarray]) -> None:
        """Fold one column block in, rescaling history to the new maxima.

        Cross-slice max and sum reductions fold in ascending column
        order, matching the plans' reduce chains.
        """
        block_max = scores[0].max(axis=1)
        for sc in scores[1:]:
            block_max = np.maximum(block_max, sc.max(axis=1))
        m_new = np.maximum(self.m, block_max)
        alpha = np.exp(self.m - m_new)
        probs = [np.exp(sc - m_new[:, None]) for sc in scores]
        block_sum = probs[0].sum(axis=1)
        for p in probs[1:]:
            block_sum = block_sum + p.sum(axis=1)
        self.l = alpha * self.l + block_sum
        for i, (p, vs) in enumerate(zip(probs, v_slices)):
            self.acc[i] = alpha[:, None] * self.acc[i] + p @ vs
        self.m = m_new

    def finalize(self) -> np.ndarray:
        total = self.acc[0]
        for a in self.acc[1:]:
            total = total + a
        return total / self.l[:, None]


def _blocked_attention(q, k, v, layer: MhaLayer, plan: SlicePlan,
                       group: GroupShape, scale: float,
                       check_state: bool) -> np.ndarray:
    s_len, d = q.shape
    out = np.empty_like(q)
    n_row_blocks = s_len // plan.b_r
    n_col_blocks = s_len // plan.b_c
    for rb in range(n_row_blocks):
        r0 = rb * plan.b_r
        qb = q[r0:r0 + plan.b_r]
        state = OnlineSoftmaxState.fresh(plan.b_r, d, group.g_x)
        ref_max = np.full(plan.b_r, -np.inf)
        for j in range(n_col_blocks):
            cols = [ts for ts in slice_layout(layer, plan, group, rb, j)
                    if ts.role == "k_t"]
            scores = [
                scale * (qb @ k[ts.row0: ts.row0 + ts.rows].T) for ts in cols
            ]
            v_slices = [v[ts.row0: ts.row0 + ts.rows] for ts in cols]
            state.absorb(scores, v_slices)
            if check_state:
                for sc in scores:
                    np.maximum(ref_max, sc.max(axis=1), out=ref_max)
                if not np.array_equal(state.m, ref_max):
                    raise AssertionError(
                        "running row maximum diverged from the true prefix maximum"
                    )
                if not np.all(state.l > 0):
                    raise AssertionError("softmax denominator not positive")
        out[r0:r0 + plan.b_r] = state.finalize()
    return out
