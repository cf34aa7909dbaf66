"""
VON generation and embedding.

Virtual nodes are mapped to distinct physical nodes, each virtual link is
routed on the first feasible of the k shortest physical paths, its modulation
is picked from the transparent-reach table and a contiguous FS block is
assigned first-fit with spectrum continuity.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trading.errors import EmbeddingBudgetExceeded, EmbeddingError, UnreachableError
from trading.spectrum import FREE, SpectrumState
from trading.topology import Route, Topology, shortest_paths

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Modulation:
    name: str
    se_bits_per_symbol: int
    fs_capacity_gbps: float
    reach_km: float


BPSK = Modulation("BPSK", 1, 25.0, 4000.0)
QPSK = Modulation("QPSK", 2, 50.0, 2000.0)
QAM8 = Modulation("8QAM", 3, 75.0, 1000.0)

# highest spectral efficiency first
MODULATIONS: tuple[Modulation, ...] = (QAM8, QPSK, BPSK)


def select_modulation(route_length_km: float) -> Modulation:
    if route_length_km <= 0:
        raise ValueError("route length must be positive")
    for modulation in MODULATIONS:
        if route_length_km <= modulation.reach_km:
            return modulation
    raise UnreachableError(f"unreachable: {route_length_km:.1f} km exceeds every transparent reach")


@dataclass(frozen=True)
class VonSpec:
    """An unembedded VON: virtual node -> physical node map plus virtual edges."""

    von_id: int
    node_map: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    def as_dict(self) -> dict[str, Any]:
        return {"von_id": self.von_id, "node_map": list(self.node_map), "edges": [list(e) for e in self.edges]}


@dataclass(frozen=True)
class VirtualLink:
    id: int
    von_id: int
    endpoints: tuple[int, int]
    physical_endpoints: tuple[int, int]
    route: Route
    modulation: Modulation
    fs_block: tuple[int, ...]

    @property
    def fs_count(self) -> int:
        return len(self.fs_block)

    @property
    def capacity_gbps(self) -> float:
        return self.fs_count * self.modulation.fs_capacity_gbps

    @property
    def assigned_fs(self) -> dict[int, frozenset[int]]:
        block = frozenset(self.fs_block)
        return {link: block for link in self.route}

    def same_endpoints(self, other: "VirtualLink") -> bool:
        return sorted(self.physical_endpoints) == sorted(other.physical_endpoints)


@dataclass(frozen=True)
class Von:
    id: int
    node_map: tuple[int, ...]
    links: tuple[VirtualLink, ...] = field(default=())


def generate_von_spec(rng: np.random.Generator, topology: Topology, von_id: int) -> VonSpec:
    n = len(topology.nodes)
    l = len(topology.links)
    if n < 2:
        raise EmbeddingError("a VON needs at least two physical nodes")

    v = int(rng.integers(math.ceil(n / 3), math.floor(2 * n / 3) + 1))
    v = min(max(v, 2), n)
    e = int(rng.integers(math.ceil(l / 3), math.floor(2 * l / 3) + 1))
    e = min(max(e, v - 1), v * (v - 1) // 2)

    node_map = tuple(int(x) for x in rng.choice(n, size=v, replace=False))

    # random recursive spanning tree, then distinct extra edges
    order = rng.permutation(v)
    edges: set[tuple[int, int]] = set()
    for i in range(1, v):
        parent = int(order[int(rng.integers(0, i))])
        child = int(order[i])
        edges.add((min(parent, child), max(parent, child)))
    extra = e - len(edges)
    if extra > 0:
        remaining = [(a, b) for a in range(v) for b in range(a + 1, v) if (a, b) not in edges]
        for index in rng.choice(len(remaining), size=extra, replace=False):
            edges.add(remaining[int(index)])

    return VonSpec(von_id, node_map, tuple(sorted(edges)))


def first_fit_block(occupancy: np.ndarray, von_id: int, width: int, guard_fs: int = 0) -> Optional[int]:
    """Lowest start index of a ``width`` block free on every row of ``occupancy``.

    Cells within ``guard_fs`` of the block must not belong to another VON.
    """
    fs_total = occupancy.shape[1]
    if width > fs_total:
        return None
    free = (occupancy == FREE).all(axis=0)
    foreign = ((occupancy != FREE) & (occupancy != von_id)).any(axis=0)
    windows = sliding_window_view(free, width).all(axis=1)
    for start in np.flatnonzero(windows):
        start = int(start)
        if guard_fs and (
            foreign[max(0, start - guard_fs):start].any()
            or foreign[start + width:start + width + guard_fs].any()
        ):
            continue
        return start
    return None


def _place(
    topology: Topology,
    spectrum: SpectrumState,
    von_id: int,
    src: int,
    dst: int,
    width: int,
    guard_fs: int,
    k: int,
) -> Optional[tuple[Route, Modulation, int]]:
    for route in shortest_paths(topology, src, dst, k):
        try:
            modulation = select_modulation(topology.route_length(route))
        except UnreachableError:
            continue
        start = first_fit_block(spectrum.occupancy(route), von_id, width, guard_fs)
        if start is not None:
            return route, modulation, start
    return None


def embed_von(
    spec: VonSpec,
    topology: Topology,
    spectrum: SpectrumState,
    fs_per_vlink: int,
    guard_fs: int = 0,
    *,
    k: int = 3,
    first_vlink_id: int = 0,
) -> Von:
    """Embed ``spec``; on failure every cell it took is released and EmbeddingError raised."""
    if fs_per_vlink < 1:
        raise ValueError("fs_per_vlink must be positive")
    links: list[VirtualLink] = []
    try:
        for offset, (u, v) in enumerate(spec.edges):
            src, dst = spec.node_map[u], spec.node_map[v]
            placement = _place(topology, spectrum, spec.von_id, src, dst, fs_per_vlink, guard_fs, k)
            if placement is None:
                raise EmbeddingError(
                    f"VON {spec.von_id}: no feasible route/block for virtual link {u}-{v} ({src}->{dst})"
                )
            route, modulation, start = placement
            block = tuple(range(start, start + fs_per_vlink))
            spectrum.assign(route, block, spec.von_id)
            links.append(
                VirtualLink(
                    id=first_vlink_id + offset,
                    von_id=spec.von_id,
                    endpoints=(u, v),
                    physical_endpoints=(src, dst),
                    route=route,
                    modulation=modulation,
                    fs_block=block,
                )
            )
    except EmbeddingError:
        spectrum.release_owner(spec.von_id)
        raise
    return Von(spec.von_id, spec.node_map, tuple(links))


def embed_vons(
    topology: Topology,
    spectrum: SpectrumState,
    count: int,
    fs_per_vlink: int,
    rng_for: Callable[[int, int], np.random.Generator],
    *,
    guard_fs: int = 0,
    k: int = 3,
    max_retries: int = 50,
) -> tuple[list[Von], list[VonSpec], int]:
    """Generate and embed ``count`` VONs; returns (vons, specs, retries used).

    ``rng_for(von_id, attempt)`` supplies the substream for each attempt, so a
    failed VON is regenerated from the next substream.
    """
    vons: list[Von] = []
    specs: list[VonSpec] = []
    retries = 0
    next_vlink_id = 0
    for von_id in range(count):
        for attempt in range(max_retries + 1):
            spec = generate_von_spec(rng_for(von_id, attempt), topology, von_id)
            try:
                von = embed_von(
                    spec, topology, spectrum, fs_per_vlink, guard_fs,
                    k=k, first_vlink_id=next_vlink_id,
                )
            except EmbeddingError as exc:
                retries += 1
                logger.warning("⚠️ %s (attempt %d)", exc, attempt + 1)
                continue
            break
        else:
            raise EmbeddingBudgetExceeded(von_id, max_retries + 1)
        vons.append(von)
        specs.append(spec)
        next_vlink_id += len(von.links)
    return vons, specs, retries
