"""A* routing over the lane graph, route smoothing and reference sampling."""
from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter
from scipy.spatial import cKDTree

from .world import LaneGraph


class NoRouteError(RuntimeError):
    pass


@dataclass
class Route:
    waypoints: np.ndarray                   # (n, 2)
    nodes: list = field(default_factory=list)
    cost: float = 0.0
    smoothed: bool = False

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        self.arclength = np.concatenate([[0.0], np.cumsum(seg)])
        self._tree = None

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.waypoints)
        return self._tree

    def point_at(self, s: float):
        """Position and tangent heading at arclength ``s`` (clamped to the route)."""
        wp, arc = self.waypoints, self.arclength
        if len(wp) == 1:
            return wp[0].copy(), None
        s = min(max(s, 0.0), arc[-1])
        k = int(np.searchsorted(arc, s, side="right") - 1)
        k = min(max(k, 0), len(wp) - 2)
        # skip zero-length segments when picking the tangent
        j = k
        while j < len(wp) - 2 and arc[j + 1] - arc[j] <= 1e-12:
            j += 1
        seg = wp[j + 1] - wp[j]
        seg_len = arc[k + 1] - arc[k]
        frac = 0.0 if seg_len <= 1e-12 else (s - arc[k]) / seg_len
        pos = wp[k] + frac * (wp[k + 1] - wp[k])
        return pos, math.atan2(seg[1], seg[0])


def astar_route(graph: LaneGraph, start: int, goal: int) -> Route:
    """Shortest-length path with the Euclidean distance as heuristic."""
    n = graph.num_nodes
    if not (0 <= start < n and 0 <= goal < n):
        raise ValueError(f"node out of range: start={start}, goal={goal}")
    pts = graph.nodes
    h = lambda u: float(math.hypot(*(pts[u] - pts[goal])))
    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), 0.0, start)]
    closed = set()
    while heap:
        _, gu, u = heapq.heappop(heap)
        if u in closed:
            continue
        if u == goal:
            path = []
            while u is not None:
                path.append(u)
                u = parent[u]
            path.reverse()
            return Route(pts[path], nodes=path, cost=gu)
        closed.add(u)
        for v, length in graph.adjacency[u]:
            cand = gu + length
            if cand < g.get(v, math.inf):
                g[v] = cand
                parent[v] = u
                heapq.heappush(heap, (cand + h(v), cand, v))
    raise NoRouteError(f"no route from node {start} to node {goal}")


def smooth_savgol(route: Route, window: int = 5, poly_order: int = 2) -> Route:
    """Savitzky-Golay smoothing of both coordinate channels.

    Interior points use the centred least-squares fit; near the ends the fit
    over the first/last window is evaluated instead, and the two endpoints
    are pinned so pickup and dropoff positions do not move.
    """
    if window % 2 == 0 or window <= poly_order:
        raise ValueError("window must be odd and larger than poly_order")
    if len(route) < window:
        warnings.warn(f"route with {len(route)} waypoints is shorter than window {window}; not smoothed")
        return Route(route.waypoints.copy(), nodes=list(route.nodes), cost=route.cost, smoothed=False)
    out = savgol_filter(route.waypoints, window, poly_order, axis=0, mode="interp")
    out[0] = route.waypoints[0]
    out[-1] = route.waypoints[-1]
    return Route(out, nodes=list(route.nodes), cost=route.cost, smoothed=True)


def resample(route: Route, spacing: float) -> Route:
    """Points every ``spacing`` meters of arclength, both endpoints kept."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    L = route.length
    if len(route) < 2 or L <= 0:
        return Route(route.waypoints[:1].copy(), nodes=list(route.nodes), cost=route.cost, smoothed=route.smoothed)
    count = max(int(math.ceil(L / spacing)), 1)
    s = np.linspace(0.0, L, count + 1)
    xy = np.column_stack([np.interp(s, route.arclength, route.waypoints[:, c]) for c in range(2)])
    return Route(xy, nodes=list(route.nodes), cost=route.cost, smoothed=route.smoothed)


def nearest_waypoint(route: Route, position, start: int | None = None, max_ahead: int | None = None):
    """Index and coordinates of the closest waypoint, smallest index on ties.

    ``start`` / ``max_ahead`` restrict the search to indices
    ``start .. start + max_ahead`` so progress along a route that comes back
    near itself stays monotone.
    """
    if len(route) == 0:
        raise ValueError("empty route")
    q = np.asarray(position, dtype=float)[:2]
    lo = 0 if start is None else min(max(int(start), 0), len(route) - 1)
    hi = len(route) - 1 if max_ahead is None else min(lo + int(max_ahead), len(route) - 1)
    if lo == 0 and hi == len(route) - 1:
        d, _ = route.tree.query(q)
    else:
        d = float(np.linalg.norm(route.waypoints[lo] - q))
    # everything no farther than d is a candidate; exact distances settle ties
    cand = np.array(route.tree.query_ball_point(q, d * (1 + 1e-9) + 1e-12), dtype=int)
    cand = cand[(cand >= lo) & (cand <= hi)]
    if cand.size == 0:
        cand = np.array([lo])
    dist = np.linalg.norm(route.waypoints[cand] - q, axis=1)
    best = cand[dist == dist.min()].min()
    return int(best), route.waypoints[best].copy()


@dataclass
class ReferenceTrajectory:
    states: np.ndarray                      # (T_p + 1, 4): x, y, heading, speed
    start_index: int
    s0: float


def build_reference(route: Route, z, T_p: int, v_ref: float = 5.0, dt: float = 0.1,
                    start: int | None = None, s_stop: float | None = None,
                    max_ahead: int | None = None) -> ReferenceTrajectory:
    """Sample ``T_p + 1`` points along the route from the waypoint nearest ``z``.

    Points advance ``v_ref * dt`` of arclength per step and are clamped at the
    route end, or at ``s_stop`` when given (used for yielding). Reference
    heading is the tangent direction; reference speed is ``v_ref`` while
    moving and zero once clamped.
    """
    if T_p < 1:
        raise ValueError("T_p must be >= 1")
    z = np.asarray(z, dtype=float)
    idx, _ = nearest_waypoint(route, z[:2], start, max_ahead)
    s0 = float(route.arclength[idx])
    end = route.length if s_stop is None else min(route.length, max(s_stop, s0))
    out = np.zeros((T_p + 1, 4))
    for tau in range(T_p + 1):
        s = min(s0 + tau * v_ref * dt, end)
        pos, heading = route.point_at(s)
        out[tau, :2] = pos
        out[tau, 2] = z[2] if heading is None else heading
        out[tau, 3] = v_ref if s0 + tau * v_ref * dt < end else 0.0
    return ReferenceTrajectory(out, idx, s0)


def plan_path(graph: LaneGraph, position, start_node: int, goal_node: int,
              spacing: float = 2.0, window: int = 5, poly_order: int = 2,
              dense_spacing: float = 0.5) -> Route:
    """Drivable path from ``position`` through ``start_node`` to ``goal_node``.

    The A* waypoints are resampled, smoothed and then densified so the
    nearest-waypoint lookup has sub-meter resolution.
    """
    coarse = astar_route(graph, start_node, goal_node)
    pts = coarse.waypoints
    pos = np.asarray(position, dtype=float)[:2]
    if np.linalg.norm(pts[0] - pos) > 1e-6:
        pts = np.vstack([pos, pts])
    base = Route(pts, nodes=coarse.nodes, cost=coarse.cost)
    even = resample(base, spacing)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        smooth = smooth_savgol(even, window, poly_order)
    return resample(smooth, dense_spacing)
