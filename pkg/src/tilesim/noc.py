"""2D-mesh topology, XY routing, and collective transfer timing.

Latencies here are uncontended service times. A transfer of ``a`` bytes
over a link of ``b`` bytes/cycle with ``h`` router hops costs
``ceil(a/b) + 2*L_d + h*L_r``: one L1-to-router injection and one
ejection, plus one hop latency per router, fully pipelined with the
payload.

Software collectives are chains of point-to-point transfers issued one
after another by the root; a hardware collective forwards (or combines)
the payload in flight along the path, paying the hop latency once per
router instead of restarting the pipeline per destination. Contention
between simultaneous transfers is not modeled here; `simcore` layers
queuing on top by treating links as serially occupied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

from .arch import ArchConfig, vector_cycles

__all__ = [
    "TileCoord",
    "CollectiveSpec",
    "NocError",
    "route_xy",
    "unicast_latency",
    "sw_collective_latency",
    "hw_collective_latency",
    "collective_latency",
    "collective_links",
]

COLLECTIVE_KINDS = ("multicast", "reduce_sum", "reduce_max")


class NocError(ValueError):
    """Invalid transfer specification for the configured mesh."""


class TileCoord(NamedTuple):
    x: int
    y: int


Link = tuple[TileCoord, TileCoord]


@dataclass(frozen=True)
class CollectiveSpec:
    """A one-to-many or many-to-one transfer along a mesh row or column.

    The span covers ``n_peers`` tiles adjacent to the root in the
    positive axis direction: a multicast copies ``payload_bytes`` from
    the root to each of them, a reduction combines their payloads into
    the root. ``elem_bytes`` sizes the per-hop combine of software
    reductions.
    """

    kind: Literal["multicast", "reduce_sum", "reduce_max"]
    axis: Literal["row", "column"]
    root: TileCoord
    n_peers: int
    payload_bytes: int
    elem_bytes: int = 2

    def __post_init__(self) -> None:
        if self.kind not in COLLECTIVE_KINDS:
            raise NocError(f"unknown collective kind {self.kind!r}")
        if self.axis not in ("row", "column"):
            raise NocError(f"unknown axis {self.axis!r}")
        if self.n_peers < 1:
            raise NocError("a collective needs at least one peer")
        if self.payload_bytes < 0:
            raise NocError("payload_bytes must be >= 0")
        if self.elem_bytes < 1:
            raise NocError("elem_bytes must be >= 1")

    @property
    def is_reduction(self) -> bool:
        return self.kind != "multicast"


def _check_in_mesh(c: TileCoord, cfg: ArchConfig) -> None:
    if not (0 <= c.x < cfg.mesh_x and 0 <= c.y < cfg.mesh_y):
        raise NocError(f"tile {tuple(c)} outside {cfg.mesh_x}x{cfg.mesh_y} mesh")


def _check_span(spec: CollectiveSpec, cfg: ArchConfig) -> None:
    _check_in_mesh(spec.root, cfg)
    if spec.axis == "row":
        end = spec.root.x + spec.n_peers
        limit = cfg.mesh_x
    else:
        end = spec.root.y + spec.n_peers
        limit = cfg.mesh_y
    if end >= limit:
        raise NocError(
            f"collective span of {spec.n_peers} peers from {tuple(spec.root)} "
            f"along {spec.axis} exceeds the mesh"
        )


def route_xy(src: TileCoord, dst: TileCoord, cfg: ArchConfig) -> list[Link]:
    """Dimension-ordered route: travel X first, then Y. Deterministic."""
    src = TileCoord(*src)
    dst = TileCoord(*dst)
    _check_in_mesh(src, cfg)
    _check_in_mesh(dst, cfg)
    links: list[Link] = []
    x, y = src
    step = 1 if dst.x > x else -1
    while x != dst.x:
        links.append((TileCoord(x, y), TileCoord(x + step, y)))
        x += step
    step = 1 if dst.y > y else -1
    while y != dst.y:
        links.append((TileCoord(x, y), TileCoord(x, y + step)))
        y += step
    return links


def span_tiles(spec: CollectiveSpec, cfg: ArchConfig) -> list[TileCoord]:
    """Root plus peers, in axis order."""
    _check_span(spec, cfg)
    if spec.axis == "row":
        return [TileCoord(spec.root.x + i, spec.root.y) for i in range(spec.n_peers + 1)]
    return [TileCoord(spec.root.x, spec.root.y + i) for i in range(spec.n_peers + 1)]


def collective_links(spec: CollectiveSpec, cfg: ArchConfig) -> list[Link]:
    """Directed links occupied by the collective.

    Multicasts flow away from the root, reductions toward it; the two
    use opposite halves of the full-duplex link pairs.
    """
    tiles = span_tiles(spec, cfg)
    if spec.is_reduction:
        return [(tiles[i + 1], tiles[i]) for i in range(spec.n_peers)]
    return [(tiles[i], tiles[i + 1]) for i in range(spec.n_peers)]


def unicast_latency(payload_bytes: int, hops: int, cfg: ArchConfig) -> int:
    """Single pipelined point-to-point transfer over `hops` routers."""
    if payload_bytes < 0 or hops < 0:
        raise NocError("payload and hop count must be >= 0")
    serial = -(-payload_bytes // cfg.noc_link_bytes_per_cycle)
    return serial + 2 * cfg.l1_to_router_cycles + hops * cfg.router_hop_cycles


def sw_collective_latency(spec: CollectiveSpec, cfg: ArchConfig) -> int:
    """Chain of N sequential unicasts, the i-th crossing i hops.

    Closed form: N*(ceil(a/b) + 2*L_d) + L_r*N*(N+1)/2. Reductions pay
    the same chain cost plus one vector-engine combine of the payload
    per chain step.
    """
    _check_span(spec, cfg)
    n = spec.n_peers
    serial = -(-spec.payload_bytes // cfg.noc_link_bytes_per_cycle)
    cycles = n * (serial + 2 * cfg.l1_to_router_cycles)
    cycles += cfg.router_hop_cycles * n * (n + 1) // 2
    if spec.is_reduction:
        elems = -(-spec.payload_bytes // spec.elem_bytes)
        cycles += n * vector_cycles("elementwise", elems, cfg)
    return cycles


def hw_collective_latency(spec: CollectiveSpec, cfg: ArchConfig) -> int:
    """Path-based in-flight forwarding: one pipelined pass over the span.

    Closed form: ceil(a/b) + 2*L_d + N*L_r. In-flight reduction combine
    latency is zero by default; `hw_reduce_hop_cycles` adds a per-hop
    ALU cost when configured.
    """
    if not cfg.hw_collectives:
        raise NocError("hardware collectives are not available in this configuration")
    _check_span(spec, cfg)
    serial = -(-spec.payload_bytes // cfg.noc_link_bytes_per_cycle)
    cycles = serial + 2 * cfg.l1_to_router_cycles + spec.n_peers * cfg.router_hop_cycles
    if spec.is_reduction:
        cycles += spec.n_peers * cfg.hw_reduce_hop_cycles
    return cycles


def collective_latency(spec: CollectiveSpec, mode: str, cfg: ArchConfig) -> int:
    if mode == "sw":
        return sw_collective_latency(spec, cfg)
    if mode == "hw":
        return hw_collective_latency(spec, cfg)
    raise NocError(f"unknown collective mode {mode!r}")
