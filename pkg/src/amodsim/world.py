"""Synthetic grid city, vehicles, passenger requests and the communication graph."""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import wrap_angle


class Occupancy(enum.Enum):
    FREE = "free"
    EN_ROUTE = "enroute"
    OCCUPIED = "occupied"


class RequestStatus(enum.IntEnum):
    # ordered so that lifecycle transitions only ever increase the value
    PENDING = 0
    ASSIGNED = 1
    IN_TRANSIT = 2
    COMPLETED = 3


class NoMetricsError(ValueError):
    """Raised when completion metrics are requested for an empty set."""


# ---------------------------------------------------------------------------
# lane graph

@dataclass
class LaneGraph:
    nodes: np.ndarray                       # (N, 2)
    edges: list                             # (u, v, length, lane_id)
    lane_polylines: list = field(default_factory=list)
    boundary_polylines: list = field(default_factory=list)
    roads: list = field(default_factory=list)   # road centerlines ((x0, y0), (x1, y1))
    drive_side: str = "LHD"
    lane_width: float = 4.0
    pickup_nodes: list = field(default_factory=list)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        if self.drive_side not in ("LHD", "RHD"):
            raise ValueError(f"drive side must be LHD or RHD, got {self.drive_side!r}")
        self.adjacency = [[] for _ in range(len(self.nodes))]
        self.reverse = [[] for _ in range(len(self.nodes))]
        for u, v, length, _ in self.edges:
            true = float(np.linalg.norm(self.nodes[v] - self.nodes[u]))
            if not length > 0 or abs(length - true) > 1e-9:
                raise ValueError(f"edge {u}->{v} has length {length}, endpoints are {true} apart")
            self.adjacency[u].append((v, length))
            self.reverse[v].append((u, length))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def bounds(self, pad: float = 10.0):
        lo = self.nodes.min(axis=0) - pad
        hi = self.nodes.max(axis=0) + pad
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def _reach(self, start: int, adj) -> set:
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen

    def is_strongly_connected(self) -> bool:
        if self.num_nodes == 0:
            return True
        n = self.num_nodes
        return len(self._reach(0, self.adjacency)) == n and len(self._reach(0, self.reverse)) == n

    def nearest_node(self, xy, candidates=None) -> int:
        idx = np.arange(self.num_nodes) if candidates is None else np.asarray(candidates)
        d = np.linalg.norm(self.nodes[idx] - np.asarray(xy, dtype=float)[:2], axis=1)
        return int(idx[int(np.argmin(d))])


def _bezier_mid(p0, c, p1):
    return 0.25 * p0 + 0.5 * c + 0.25 * p1


def _line_intersection(p, d, q, e):
    # p + a d = q + b e
    M = np.array([[d[0], -e[0]], [d[1], -e[1]]])
    a, _ = np.linalg.solve(M, q - p)
    return p + a * d


def build_grid_city(blocks=(4, 4), block_size: float = 100.0, lane_width: float = 4.0,
                    margin: float = 8.0, curb_offset: float = 4.0, drive_side: str = "LHD",
                    u_turns: bool | None = None) -> LaneGraph:
    """Manhattan grid with one lane per direction on every road.

    Each directed lane is an entry node, a curb bay at mid-block and an exit
    node; the bay sits ``curb_offset`` outside the lane so stopped vehicles
    leave the lane clear. Intersections link every incoming lane to every
    outgoing lane except the U-turn through a Bezier midpoint node.
    ``LHD`` traffic keeps right, ``RHD`` traffic keeps left. ``u_turns``
    defaults to on only for a single block, where the two ring directions
    would otherwise never meet.
    """
    nx_, ny_ = int(blocks[0]), int(blocks[1])
    if nx_ < 1 or ny_ < 1:
        raise ValueError("need at least one block in each direction")
    if u_turns is None:
        u_turns = nx_ == 1 and ny_ == 1
    if block_size <= 2 * margin + 1.0:
        raise ValueError("block_size too small for the intersection margin")
    side = 1.0 if drive_side == "LHD" else -1.0
    nodes, edges = [], []
    lane_polylines, boundaries, roads = [], [], []
    pickup = []

    def add(p):
        nodes.append(np.asarray(p, dtype=float))
        return len(nodes) - 1

    def link(u, v, lane):
        length = float(np.linalg.norm(nodes[v] - nodes[u]))
        edges.append((u, v, length, lane))

    inter = {(a, b): np.array([a * block_size, b * block_size]) for a in range(nx_ + 1) for b in range(ny_ + 1)}
    incoming = {k: [] for k in inter}
    outgoing = {k: [] for k in inter}
    lane_id = 0
    road_pairs = []
    for a in range(nx_ + 1):
        for b in range(ny_ + 1):
            if a < nx_:
                road_pairs.append(((a, b), (a + 1, b)))
            if b < ny_:
                road_pairs.append(((a, b), (a, b + 1)))
    half = lane_width
    for ka, kb in road_pairs:
        P, Q = inter[ka], inter[kb]
        roads.append((tuple(P), tuple(Q)))
        d0 = (Q - P) / np.linalg.norm(Q - P)
        r0 = np.array([d0[1], -d0[0]])
        boundaries.append([tuple(P + d0 * half + r0 * half), tuple(Q - d0 * half + r0 * half)])
        boundaries.append([tuple(P + d0 * half - r0 * half), tuple(Q - d0 * half - r0 * half)])
        for src, dst in ((ka, kb), (kb, ka)):
            S, D = inter[src], inter[dst]
            d = (D - S) / np.linalg.norm(D - S)
            r = np.array([d[1], -d[0]])
            lateral = side * 0.5 * lane_width * r
            e = add(S + d * margin + lateral)
            c = add(0.5 * (S + D) + lateral + side * curb_offset * r)
            x = add(D - d * margin + lateral)
            link(e, x, lane_id)
            link(e, c, lane_id)
            link(c, x, lane_id)
            pickup.append(c)
            lane_polylines.append([tuple(nodes[e]), tuple(nodes[x])])
            outgoing[src].append((e, d))
            incoming[dst].append((x, d))
            lane_id += 1
    for k in inter:
        for x, d_in in incoming[k]:
            for e, d_out in outgoing[k]:
                if np.dot(d_in, d_out) < -0.5:
                    if not u_turns:
                        continue
                    mid = 0.5 * (nodes[x] + nodes[e]) + d_in * lane_width
                elif np.dot(d_in, d_out) > 0.5:
                    mid = 0.5 * (nodes[x] + nodes[e])
                else:
                    corner = _line_intersection(nodes[x], d_in, nodes[e], d_out)
                    mid = _bezier_mid(nodes[x], corner, nodes[e])
                m = add(mid)
                link(x, m, lane_id)
                link(m, e, lane_id)
                lane_id += 1
    return LaneGraph(nodes=np.array(nodes), edges=edges, lane_polylines=lane_polylines,
                     boundary_polylines=boundaries, roads=roads, drive_side=drive_side,
                     lane_width=lane_width, pickup_nodes=pickup)


# ---------------------------------------------------------------------------
# vehicles and requests

@dataclass
class VehicleState:
    id: int
    z: np.ndarray
    occupancy: Occupancy = Occupancy.FREE
    request_id: int | None = None
    route_nodes: list = field(default_factory=list)
    # node the vehicle is parked at or last routed from
    node: int | None = None
    path: object = None                     # routing.Route being followed
    progress: int = 0                       # index into path of the last nearest waypoint
    node_path_index: list = field(default_factory=list)
    controls: np.ndarray | None = None      # last plan, used to warm start

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).copy()
        self.z[2] = wrap_angle(self.z[2])

    @property
    def position(self) -> np.ndarray:
        return self.z[:2]

    @property
    def is_free(self) -> bool:
        return self.occupancy is Occupancy.FREE


@dataclass
class Request:
    id: int
    pickup: tuple
    dropoff: tuple
    spawn_time: float
    pickup_node: int | None = None
    dropoff_node: int | None = None
    pickup_time: float | None = None
    dropoff_time: float | None = None
    status: RequestStatus = RequestStatus.PENDING
    vehicle_id: int | None = None

    def advance(self, status: RequestStatus, t: float | None = None) -> None:
        if status < self.status:
            raise ValueError(f"request {self.id}: cannot go from {self.status.name} to {status.name}")
        self.status = status
        if status is RequestStatus.IN_TRANSIT:
            self.pickup_time = t
        elif status is RequestStatus.COMPLETED:
            self.dropoff_time = t

    @property
    def completion_time(self) -> float:
        if self.dropoff_time is None:
            raise ValueError(f"request {self.id} has no dropoff time")
        return self.dropoff_time - self.spawn_time

    def to_record(self) -> dict:
        return {
            "id": self.id, "pickup": list(self.pickup), "dropoff": list(self.dropoff),
            "spawn_time": self.spawn_time, "pickup_time": self.pickup_time,
            "dropoff_time": self.dropoff_time, "status": self.status.name, "vehicle": self.vehicle_id,
        }


@dataclass
class WorldState:
    graph: LaneGraph
    vehicles: list
    requests: dict = field(default_factory=dict)
    time: float = 0.0
    step: int = 0
    dt: float = 0.1
    next_request_id: int = 1
    spawned: int = 0

    def vehicle(self, vid: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(f"unknown vehicle {vid}")

    def pending(self) -> list:
        return sorted((r for r in self.requests.values() if r.status is RequestStatus.PENDING),
                      key=lambda r: (r.spawn_time, r.id))

    def free_vehicles(self) -> list:
        return [v for v in self.vehicles if v.is_free]

    def completed(self) -> list:
        return [r for r in self.requests.values() if r.status is RequestStatus.COMPLETED]

    def open_requests(self) -> list:
        return [r for r in self.requests.values() if r.status is not RequestStatus.COMPLETED]

    def to_record(self) -> dict:
        """Line-delimited snapshot of the tick."""
        return {
            "step": self.step,
            "time": round(self.time, 6),
            "vehicles": [{"id": v.id, "z": [round(float(c), 6) for c in v.z],
                          "occupancy": v.occupancy.value, "request": v.request_id} for v in self.vehicles],
            "requests": [r.to_record() for r in sorted(self.requests.values(), key=lambda r: r.id)
                         if r.status is not RequestStatus.COMPLETED],
        }


def place_vehicles(graph: LaneGraph, count: int, rng: np.random.Generator) -> list:
    """Park ``count`` vehicles on distinct curb bays, heading along their lane."""
    if count > len(graph.pickup_nodes):
        raise ValueError(f"{count} vehicles but only {len(graph.pickup_nodes)} curb bays")
    chosen = rng.choice(len(graph.pickup_nodes), size=count, replace=False)
    vehicles = []
    for vid, k in enumerate(sorted(int(c) for c in chosen), start=1):
        node = graph.pickup_nodes[k]
        succ = graph.adjacency[node][0][0]
        d = graph.nodes[succ] - graph.nodes[node]
        heading = math.atan2(d[1], d[0])
        x, y = graph.nodes[node]
        vehicles.append(VehicleState(id=vid, z=np.array([x, y, heading, 0.0]), node=node))
    return vehicles


def spawn_request(world: WorldState, rng, rate: float, limit: int | None = None) -> WorldState:
    """Add ``Poisson(rate)`` pending requests between distinct curb bays.

    ``rng`` is a numpy Generator or an integer seed. ``limit`` caps the total
    number ever spawned in this world.
    """
    if rate < 0:
        raise ValueError("spawn rate must be non-negative")
    if rate == 0:
        return world
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    count = int(rng.poisson(rate))
    if limit is not None:
        count = min(count, max(limit - world.spawned, 0))
    return _add_requests(world, rng, count)


def _add_requests(world: WorldState, rng: np.random.Generator, count: int) -> WorldState:
    pool = world.graph.pickup_nodes
    for _ in range(count):
        a, b = rng.choice(len(pool), size=2, replace=False)
        pn, dn = pool[int(a)], pool[int(b)]
        req = Request(id=world.next_request_id,
                      pickup=tuple(float(c) for c in world.graph.nodes[pn]),
                      dropoff=tuple(float(c) for c in world.graph.nodes[dn]),
                      spawn_time=world.time, pickup_node=pn, dropoff_node=dn)
        world.requests[req.id] = req
        world.next_request_id += 1
        world.spawned += 1
    return world


def compute_metrics(completed) -> tuple:
    """``(T_atc, T_stc, T_mtc)``: mean, population std and max of completion times."""
    times = np.array([r.completion_time for r in completed], dtype=float)
    if times.size == 0:
        raise NoMetricsError("no completed requests")
    return float(times.mean()), float(times.std()), float(times.max())


# ---------------------------------------------------------------------------
# communication graph

@dataclass
class CommunicationGraph:
    vertices: list
    edges: dict                             # (i, j) with i < j -> distance
    neighbors: dict

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges


def build_communication_graph(vehicles, r_tele: float = 30.0) -> CommunicationGraph:
    if r_tele <= 0:
        raise ValueError("r_tele must be positive")
    ids = [v.id for v in vehicles]
    seen = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate vehicle id {i}")
        seen.add(i)
    pos = np.array([v.z[:2] for v in vehicles], dtype=float).reshape(-1, 2)
    edges = {}
    neighbors = {i: [] for i in ids}
    if len(ids) > 1:
        dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        rows, cols = np.nonzero(np.triu(dist < r_tele, k=1))
        for a, b in zip(rows, cols):
            i, j = ids[a], ids[b]
            edges[(min(i, j), max(i, j))] = float(dist[a, b])
            neighbors[i].append(j)
            neighbors[j].append(i)
    return CommunicationGraph(vertices=ids, edges=edges,
                              neighbors={i: sorted(n) for i, n in neighbors.items()})
