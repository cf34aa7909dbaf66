"""
Physical EON model: nodes, weighted fiber links and k-shortest routing.

The topology is immutable once loaded and can be shared by every component
of a run. Spectrum ownership lives in :mod:`trading.spectrum`.
"""
from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Union

import networkx as nx
from pydantic import ValidationError

from models.schemas import TopologyDocument
from trading.credit import CREDIT_SCALE
from trading.errors import TopologyError

logger = logging.getLogger(__name__)

DEFAULT_FS_TOTAL = 358

Route = tuple[int, ...]
Normalization = Literal["max", "fixed"]


@dataclass(frozen=True)
class PhysicalNode:
    id: int
    name: str


@dataclass(frozen=True)
class PhysicalLink:
    id: int
    endpoints: tuple[int, int]
    length_km: float
    fs_total: int

    @property
    def a(self) -> int:
        return self.endpoints[0]

    @property
    def b(self) -> int:
        return self.endpoints[1]

    def other_end(self, node: int) -> int:
        if node == self.a:
            return self.b
        if node == self.b:
            return self.a
        raise TopologyError(f"node {node} is not an endpoint of link {self.id}")


class Topology:
    """Connected, undirected fiber graph with dense node and link indices."""

    def __init__(
        self,
        nodes: list[PhysicalNode],
        links: list[PhysicalLink],
        *,
        normalization: Normalization = "max",
        normalization_km: float = 1000.0,
    ):
        self.nodes = tuple(nodes)
        self.links = tuple(links)
        self.normalization = normalization
        self.normalization_km = normalization_km
        self.graph = nx.Graph()
        self.graph.add_nodes_from(node.id for node in self.nodes)
        for link in self.links:
            self.graph.add_edge(link.a, link.b, link_id=link.id, length_km=link.length_km)
        self._max_length = max(link.length_km for link in self.links)
        self._path_cache: dict[tuple[int, int, int], list[Route]] = {}

    @property
    def fs_total(self) -> int:
        return self.links[0].fs_total

    def node(self, node_id: int) -> PhysicalNode:
        if not 0 <= node_id < len(self.nodes):
            raise TopologyError(f"unknown node {node_id}")
        return self.nodes[node_id]

    def link(self, link_id: int) -> PhysicalLink:
        if not 0 <= link_id < len(self.links):
            raise TopologyError(f"unknown link {link_id}")
        return self.links[link_id]

    def link_between(self, u: int, v: int) -> PhysicalLink:
        data = self.graph.get_edge_data(u, v)
        if data is None:
            raise TopologyError(f"no link between nodes {u} and {v}")
        return self.links[data["link_id"]]

    def normalized_length(self, link_id: int) -> float:
        length = self.link(link_id).length_km
        if self.normalization == "fixed":
            return length / self.normalization_km
        return length / self._max_length

    def credit_weight(self, link_id: int) -> int:
        """Normalized length in fixed-point credit units."""
        return round(self.normalized_length(link_id) * CREDIT_SCALE)

    def route_length(self, route: Route) -> float:
        return sum(self.links[link_id].length_km for link_id in route)

    def route_from_nodes(self, nodes: list[int]) -> Route:
        return tuple(self.link_between(u, v).id for u, v in zip(nodes, nodes[1:]))

    def route_nodes(self, route: Route, src: int) -> list[int]:
        nodes = [src]
        for link_id in route:
            nodes.append(self.links[link_id].other_end(nodes[-1]))
        return nodes


def normalized_length(topology: Topology, link: int) -> float:
    return topology.normalized_length(link)


def shortest_paths(topology: Topology, src: int, dst: int, k: int) -> list[Route]:
    """Return up to ``k`` loop-free routes from ``src`` to ``dst``.

    Routes are link-id tuples ordered by total length; equal lengths are
    ordered by their link-id sequence. Wraps
    :func:`networkx.shortest_simple_paths`, which yields simple paths in
    nondecreasing weight, and keeps reading past the k-th path while the
    length still ties so the tie-break sees every candidate.

    Raises:
        ValueError: if ``k`` is not positive or ``src == dst``.
        TopologyError: if either node is unknown or no path exists.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if src == dst:
        raise ValueError("source and destination must differ")
    topology.node(src)
    topology.node(dst)

    key = (src, dst, k)
    cached = topology._path_cache.get(key)
    if cached is not None:
        return list(cached)

    candidates: list[tuple[float, Route]] = []
    cutoff = None
    try:
        for nodes in nx.shortest_simple_paths(topology.graph, src, dst, weight="length_km"):
            route = topology.route_from_nodes(nodes)
            length = round(topology.route_length(route), 6)
            if cutoff is not None and length > cutoff:
                break
            candidates.append((length, route))
            if len(candidates) == k:
                cutoff = length
    except nx.NetworkXNoPath as exc:
        raise TopologyError(f"no path between {src} and {dst}") from exc

    candidates.sort()
    routes = [route for _, route in candidates[:k]]
    topology._path_cache[key] = routes
    return list(routes)


def _read_document(source: Union[str, os.PathLike, Mapping]) -> TopologyDocument:
    try:
        if isinstance(source, Mapping):
            return TopologyDocument.model_validate(source)
        if isinstance(source, str) and source.lstrip().startswith("{"):
            return TopologyDocument.model_validate_json(source)
        return TopologyDocument.model_validate_json(Path(source).read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise TopologyError(f"parse error: {exc}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise TopologyError(f"parse error: {exc}") from exc


def load_topology(
    source: Union[str, os.PathLike, Mapping],
    *,
    fs_total: int = DEFAULT_FS_TOTAL,
    normalization: Normalization = "max",
    normalization_km: float = 1000.0,
) -> Topology:
    """Parse and validate a topology document (a path, JSON text or mapping)."""
    if fs_total <= 0:
        raise TopologyError("fs_total must be positive")
    document = _read_document(source)

    node_ids = [node.id for node in document.nodes]
    if sorted(node_ids) != list(range(len(node_ids))):
        raise TopologyError("parse error: node ids must be dense 0..N-1")
    names = [node.name for node in document.nodes]
    if len(set(names)) != len(names):
        raise TopologyError("parse error: node names must be unique")
    link_ids = [link.id for link in document.links]
    if not link_ids or sorted(link_ids) != list(range(len(link_ids))):
        raise TopologyError("parse error: link ids must be dense 0..L-1")

    nodes = sorted((PhysicalNode(node.id, node.name) for node in document.nodes), key=lambda n: n.id)
    seen: set[frozenset[int]] = set()
    links = []
    for spec in sorted(document.links, key=lambda link: link.id):
        if spec.a not in range(len(nodes)) or spec.b not in range(len(nodes)):
            raise TopologyError(f"parse error: link {spec.id} references an unknown node")
        if spec.a == spec.b:
            raise TopologyError(f"self-loop on link {spec.id}")
        if spec.length_km <= 0:
            raise TopologyError(f"nonpositive length on link {spec.id}")
        pair = frozenset((spec.a, spec.b))
        if pair in seen:
            raise TopologyError(f"duplicate edge between nodes {spec.a} and {spec.b}")
        seen.add(pair)
        links.append(PhysicalLink(spec.id, (spec.a, spec.b), float(spec.length_km), fs_total))

    topology = Topology(nodes, links, normalization=normalization, normalization_km=normalization_km)
    if not nx.is_connected(topology.graph):
        raise TopologyError("disconnected graph")
    if normalization == "fixed" and max(link.length_km for link in links) > normalization_km:
        raise TopologyError(f"a link is longer than the normalization constant {normalization_km} km")

    logger.info("Loaded topology with N=%d nodes, L=%d links", len(nodes), len(links))
    return topology
