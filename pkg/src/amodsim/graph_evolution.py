"""Partitioning the fleet into disjoint collision-risk subgraphs."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import bev
from .gateway import GRAPH_EVOLUTION, GatewayError, ParseError, parse_structured
from .memory import retrieve_top_k
from .world import VehicleState

log = logging.getLogger(__name__)


class UnionFind:
    def __init__(self, items=()):
        self.parent = {}
        self.size = {}
        for x in items:
            self.add(x)

    def add(self, x) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True

    def groups(self) -> list:
        out = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return _canonical(out.values())


def _canonical(groups) -> list:
    return sorted((sorted(g) for g in groups if g), key=lambda g: g[0])


@dataclass
class Partition:
    groups: list
    ids: list
    source: str = "heuristic"
    fallback: bool = False
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        self.groups = _canonical(self.groups)
        self.ids = sorted(self.ids)

    @property
    def adjacency(self) -> np.ndarray:
        return partition_to_adjacency(self)

    def group_of(self, vid: int) -> list:
        for g in self.groups:
            if vid in g:
                return g
        raise KeyError(vid)

    def to_record(self) -> dict:
        return {"groups": self.groups, "source": self.source, "fallback": self.fallback}


def _split_oversize(members, edges, max_size):
    """Drop the longest edges of a component until every piece fits ``max_size``."""
    pending = [(list(members), [e for e in edges if e[1] in members and e[2] in members])]
    done = []
    while pending:
        comp, comp_edges = pending.pop()
        if len(comp) <= max_size:
            done.append(comp)
            continue
        # longest first, ties broken by the id pair
        comp_edges = sorted(comp_edges, key=lambda e: (-e[0], e[1], e[2]))[1:]
        uf = UnionFind(comp)
        for _, a, b in comp_edges:
            uf.union(a, b)
        for g in uf.groups():
            gs = set(g)
            pending.append((g, [e for e in comp_edges if e[1] in gs]))
    return done


def evolve_manhattan(vehicles, threshold: float = 20.0, max_size=4) -> Partition:
    """Components of the graph linking vehicles closer than ``threshold`` in L1 distance.

    ``max_size`` of None or infinity disables splitting.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if max_size is not None and max_size < 1:
        raise ValueError("max_size must be >= 1")
    ids = [v.id for v in vehicles]
    pos = {v.id: np.asarray(v.z[:2], dtype=float) for v in vehicles}
    edges = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = sorted((ids[a], ids[b]))
            d = float(np.abs(pos[i] - pos[j]).sum())
            if d < threshold:
                edges.append((d, i, j))
    uf = UnionFind(ids)
    for _, i, j in edges:
        uf.union(i, j)
    groups = uf.groups()
    if max_size is not None and not math.isinf(max_size):
        split = []
        for g in groups:
            split.extend(_split_oversize(g, edges, int(max_size)) if len(g) > max_size else [g])
        groups = split
    return Partition(groups, ids, "heuristic")


def sanitize_groups(groups, ids) -> list:
    """Drop unknown ids, merge overlapping groups and add missing vehicles as singletons."""
    known = set(ids)
    uf = UnionFind(sorted(known))
    for g in groups:
        members = [x for x in g if x in known]
        for x in members[1:]:
            uf.union(members[0], x)
    return uf.groups()


def evolve_lmm(world, gateway, memory=None, k: int = 3, retries: int = 2,
               threshold: float = 20.0, max_size=4, image=None) -> Partition:
    """Risk groups proposed by the gateway, sanitized into a valid partition.

    Falls back to :func:`evolve_manhattan` when no response parses.
    """
    ids = [v.id for v in world.vehicles]
    image = image if image is not None else bev.render_bev(world, GRAPH_EVOLUTION)
    exemplars = retrieve_top_k(memory, image, k, GRAPH_EVOLUTION) if memory is not None else []
    bundle = bev.compose_prompt(image, GRAPH_EVOLUTION, world, exemplars, max_exemplars=k)
    detail = {"responses": [], "errors": []}
    for _ in range(max(retries, 1)):
        try:
            ex = gateway.query(bundle, GRAPH_EVOLUTION)
        except GatewayError as exc:
            detail["errors"].append(str(exc))
            break
        detail["responses"].append(ex.response)
        try:
            groups = parse_structured(ex.response, GRAPH_EVOLUTION)
        except ParseError as exc:
            detail["errors"].append(str(exc))
            continue
        if memory is not None:
            memory.add(image, bundle.task_message, ex.response, variant=GRAPH_EVOLUTION)
        return Partition(sanitize_groups(groups, ids), ids, "lmm", detail=detail)
    log.info("graph evolution falls back to the Manhattan heuristic")
    p = evolve_manhattan(world.vehicles, threshold, max_size)
    return Partition(p.groups, ids, "lmm", fallback=True, detail=detail)


def partition_to_adjacency(p: Partition) -> np.ndarray:
    """Boolean matrix over ``p.ids`` with a clique per group."""
    index = {vid: n for n, vid in enumerate(p.ids)}
    adj = np.zeros((len(p.ids), len(p.ids)), dtype=bool)
    for g in p.groups:
        rows = [index[v] for v in g]
        adj[np.ix_(rows, rows)] = True
    np.fill_diagonal(adj, False)
    return adj


def components(adj: np.ndarray, ids) -> list:
    uf = UnionFind(ids)
    rows, cols = np.nonzero(np.asarray(adj))
    for a, b in zip(rows, cols):
        uf.union(ids[a], ids[b])
    return uf.groups()


def manhattan_responder(threshold: float = 20.0, max_size=4):
    """Offline stand-in for the model's grouping answer, built on the heuristic."""
    def respond(bundle, variant=None, index=None) -> str:
        vehicles = [VehicleState(id=vid, z=np.asarray(z)) for vid, z in bundle.context.get("vehicles", [])]
        groups = evolve_manhattan(vehicles, threshold, max_size).groups if vehicles else []
        return json.dumps({"groups": groups})
    return respond
