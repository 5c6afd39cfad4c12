import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amodsim.world import (LaneGraph, NoMetricsError, Occupancy, Request, RequestStatus, VehicleState,
                           WorldState, build_communication_graph, build_grid_city, compute_metrics,
                           place_vehicles, spawn_request, _add_requests)


def _veh(i, x, y):
    return VehicleState(id=i, z=np.array([x, y, 0.0, 0.0]))


def _done(spawn, dropoff):
    r = Request(id=1, pickup=(0, 0), dropoff=(1, 1), spawn_time=spawn)
    r.advance(RequestStatus.IN_TRANSIT, spawn)
    r.advance(RequestStatus.COMPLETED, dropoff)
    return r


@pytest.fixture(scope="module")
def city():
    return build_grid_city()


# ---------------------------------------------------------------------------
# lane graph

@pytest.mark.parametrize("drive_side", ["LHD", "RHD"])
def test_edge_lengths_are_euclidean(drive_side):
    g = build_grid_city((3, 2), 60.0, drive_side=drive_side)
    for u, v, length, _ in g.edges:
        assert length > 0
        assert abs(length - float(np.linalg.norm(g.nodes[u] - g.nodes[v]))) <= 1e-9


@pytest.mark.parametrize("blocks", [(1, 1), (2, 3), (4, 4)])
def test_strongly_connected(blocks):
    # a single block needs U-turns at its corners, larger grids do not
    g = build_grid_city(blocks, 50.0)
    assert g.is_strongly_connected()
    dg = nx.DiGraph()
    dg.add_nodes_from(range(g.num_nodes))
    dg.add_edges_from((u, v) for u, v, _, _ in g.edges)
    assert nx.is_strongly_connected(dg)


def test_lane_side_follows_drive_side():
    # eastbound lane on the bottom road: LHD keeps right (south), RHD keeps left (north)
    for side, sign in (("LHD", -1), ("RHD", 1)):
        g = build_grid_city((1, 1), 40.0, drive_side=side)
        east = [(u, v) for u, v, _, _ in g.edges
                if g.nodes[v][0] - g.nodes[u][0] > 10 and abs(g.nodes[v][1] - g.nodes[u][1]) < 1e-9
                and abs(g.nodes[u][1]) < 5]
        assert east
        assert all(np.sign(g.nodes[u][1]) == sign for u, _ in east)


def test_bounds_cover_nodes(city):
    x0, y0, x1, y1 = city.bounds(pad=0.0)
    assert np.all(city.nodes >= np.array([x0, y0]) - 1e-9)
    assert np.all(city.nodes <= np.array([x1, y1]) + 1e-9)


def test_bad_city_arguments():
    with pytest.raises(ValueError):
        build_grid_city((0, 2))
    with pytest.raises(ValueError):
        build_grid_city((2, 2), block_size=10.0)


# ---------------------------------------------------------------------------
# communication graph

def test_two_vehicles_one_edge():
    g = build_communication_graph([_veh(1, 0, 0), _veh(2, 0, 5)], 10.0)
    assert list(g.edges) == [(1, 2)]
    assert g.neighbors == {1: [2], 2: [1]}


def test_single_vehicle_no_edges():
    g = build_communication_graph([_veh(1, 0, 0)], 10.0)
    assert g.edges == {} and g.neighbors == {1: []}


def test_grid_matches_brute_force():
    vehicles = [_veh(k + 1, 20.0 * (k % 4), 20.0 * (k // 4)) for k in range(10)]
    g = build_communication_graph(vehicles, 25.0)
    expect = set()
    for a in vehicles:
        for b in vehicles:
            if a.id < b.id and math.dist(a.z[:2], b.z[:2]) < 25.0:
                expect.add((a.id, b.id))
    assert set(g.edges) == expect


def test_duplicate_id_rejected():
    with pytest.raises(ValueError, match="7"):
        build_communication_graph([_veh(7, 0, 0), _veh(7, 1, 1)])


def test_nonpositive_range_rejected():
    with pytest.raises(ValueError):
        build_communication_graph([_veh(1, 0, 0)], 0.0)


@settings(max_examples=100, deadline=None)
@given(pts=st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=12),
       r=st.floats(0.5, 60))
def test_graph_membership_property(pts, r):
    vehicles = [_veh(i + 1, x, y) for i, (x, y) in enumerate(pts)]
    g = build_communication_graph(vehicles, r)
    for a in vehicles:
        assert a.id not in g.neighbors[a.id]
        assert g.degree(a.id) == len(g.neighbors[a.id])
        for b in vehicles:
            if a.id == b.id:
                continue
            linked = math.dist(a.z[:2], b.z[:2]) < r
            assert g.has_edge(a.id, b.id) == linked == g.has_edge(b.id, a.id)
            assert (b.id in g.neighbors[a.id]) == linked


# ---------------------------------------------------------------------------
# requests

def test_rate_zero_is_noop(city):
    w = WorldState(city, [])
    spawn_request(w, 0, 0.0)
    assert w.requests == {}


def test_negative_rate_rejected(city):
    with pytest.raises(ValueError):
        spawn_request(WorldState(city, []), 0, -1.0)


def test_request_stream_deterministic(city):
    def stream():
        w = WorldState(city, [])
        rng = np.random.default_rng(42)
        for step in range(3):
            w.time = step * 0.1
            spawn_request(w, rng, 1.0)
        return [r.to_record() for r in w.requests.values()]
    assert stream() == stream()


def test_pickup_differs_from_dropoff(city):
    w = WorldState(city, [])
    _add_requests(w, np.random.default_rng(0), 10_000)
    assert len(w.requests) == 10_000
    assert all(r.pickup != r.dropoff for r in w.requests.values())
    assert all(r.pickup_node in city.pickup_nodes for r in w.requests.values())


def test_spawn_limit(city):
    w = WorldState(city, [])
    rng = np.random.default_rng(1)
    for _ in range(50):
        spawn_request(w, rng, 2.0, limit=7)
    assert w.spawned == 7


def test_request_lifecycle_monotone():
    r = Request(id=1, pickup=(0, 0), dropoff=(1, 1), spawn_time=0.0)
    r.advance(RequestStatus.ASSIGNED)
    r.advance(RequestStatus.IN_TRANSIT, 2.0)
    with pytest.raises(ValueError):
        r.advance(RequestStatus.PENDING)
    r.advance(RequestStatus.COMPLETED, 5.0)
    assert r.spawn_time <= r.pickup_time <= r.dropoff_time
    assert r.completion_time == 5.0


def test_vehicles_on_distinct_curbs(city):
    vs = place_vehicles(city, 10, np.random.default_rng(3))
    assert len({v.node for v in vs}) == 10
    assert all(v.occupancy is Occupancy.FREE and v.z[3] == 0 for v in vs)
    with pytest.raises(ValueError):
        place_vehicles(city, len(city.pickup_nodes) + 1, np.random.default_rng(0))


def test_heading_normalized():
    v = VehicleState(id=1, z=[0, 0, 3 * math.pi, 1])
    assert -math.pi < v.z[2] <= math.pi


# ---------------------------------------------------------------------------
# metrics

def test_metrics_equal_times():
    assert compute_metrics([_done(0, 10), _done(5, 15)]) == (10.0, 0.0, 10.0)


def test_metrics_hand_case():
    assert compute_metrics([_done(0, 4), _done(0, 8)]) == pytest.approx((6.0, 2.0, 8.0))


def test_metrics_empty():
    with pytest.raises(NoMetricsError):
        compute_metrics([])


def test_metrics_layout():
    out = compute_metrics([_done(0, 11.15)])
    assert len(out) == 3 and out[1] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=40))
def test_metric_identities(times):
    atc, stc, mtc = compute_metrics([_done(0.0, t) for t in times])
    assert mtc >= atc - 1e-9 and atc >= 0 and stc >= 0
    assert mtc == max(times)


def test_lane_graph_rejects_bad_edge():
    with pytest.raises(ValueError):
        LaneGraph(nodes=np.array([[0.0, 0.0], [1.0, 0.0]]), edges=[(0, 1, 2.0, 0)])
