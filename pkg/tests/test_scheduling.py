import itertools
import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from amodsim.gateway import GatewayUnavailable, MockGateway
from amodsim.memory import MemoryStore
from amodsim.scheduling import (Assignment, df_match, distance_load_responder, fcfs_match, schedule_df,
                                schedule_fcfs, schedule_lmm, validate_assignment)
from amodsim.world import RequestStatus


def _total(cost, rids, vids, pairs):
    return sum(cost[rids.index(r)][vids.index(v)] for r, v in pairs.items())


# ---------------------------------------------------------------------------
# FCFS

def test_fcfs_single_pair(make_world):
    w = make_world([(1, (0, 0))], [(1, (5, 5), 0.0)])
    assert schedule_fcfs(w).pairs == {1: 1}


def test_fcfs_no_pending(make_world):
    assert schedule_fcfs(make_world([(1, (0, 0))])).pairs == {}


def test_fcfs_two_by_two_enumeration(make_world):
    # r1 is older; v1 sits near r2 and v2 near r1
    rng = np.random.default_rng(0)
    for _ in range(200):
        pts = rng.uniform(0, 100, size=(4, 2))
        w = make_world([(1, pts[0]), (2, pts[1])], [(1, pts[2], 0.0), (2, pts[3], 1.0)])
        d = {(r, v): float(np.linalg.norm(pts[2 + r - 1] - pts[v - 1])) for r in (1, 2) for v in (1, 2)}
        first = min((1, 2), key=lambda v: (d[(1, v)], v))
        expect = {1: first, 2: 3 - first}
        assert schedule_fcfs(w).pairs == expect


def test_fcfs_order_and_ties():
    # equal spawn times fall back to request id; equal distances to vehicle id
    assert fcfs_match([[1.0, 1.0], [1.0, 1.0]], [3, 4], [8, 2]) == {3: 2, 4: 8}


# ---------------------------------------------------------------------------
# DF

def test_df_single_pair(make_world):
    assert schedule_df(make_world([(4, (0, 0))], [(9, (1, 1), 0.0)])).pairs == {9: 4}


def test_df_matrix_case():
    cost = [[1.0, 5.0], [2.0, 1.0]]
    pairs = df_match(cost, [1, 2], [1, 2])
    assert pairs == {1: 1, 2: 2}
    # brute force over the two perfect matchings
    best = min(itertools.permutations([1, 2]),
               key=lambda p: sum(cost[r][p[r] - 1] for r in range(2)))
    assert _total(cost, [1, 2], [1, 2], pairs) == 2.0 == sum(cost[r][best[r] - 1] for r in range(2))


def test_df_leaves_extra_request_pending(make_world):
    w = make_world([(1, (0, 0)), (2, (50, 0))], [(1, (1, 0), 0.0), (2, (49, 0), 0.0), (3, (25, 0), 0.0)])
    a = schedule_df(w)
    assert len(a.pairs) == 2 and 3 not in a.pairs


def test_df_ties_by_ids():
    assert df_match([[2.0, 2.0], [2.0, 2.0]], [5, 6], [7, 3]) == {5: 3, 6: 7}


def test_df_first_pair_is_global_minimum():
    # the committed first pair is never longer than any FCFS pair
    rng = np.random.default_rng(1)
    for _ in range(500):
        n_r, n_v = rng.integers(1, 5, 2)
        cost = rng.uniform(0, 10, size=(n_r, n_v))
        rids, vids = list(range(1, n_r + 1)), list(range(1, n_v + 1))
        df = df_match(cost, rids, vids)
        fc = fcfs_match(cost, rids, vids)
        assert len(df) == len(fc) == min(n_r, n_v)
        assert min(cost[r - 1][v - 1] for r, v in df.items()) == cost.min()
        assert cost.min() <= min(cost[r - 1][v - 1] for r, v in fc.items())


def test_df_total_can_exceed_fcfs_total():
    # greedy global-min does not dominate FCFS in total distance
    cost = [[2.0, 10.0], [1.0, 3.0]]
    df, fc = df_match(cost, [1, 2], [1, 2]), fcfs_match(cost, [1, 2], [1, 2])
    assert _total(cost, [1, 2], [1, 2], df) == 11.0
    assert _total(cost, [1, 2], [1, 2], fc) == 5.0


# make_world is a stateless factory, safe to share across examples
@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2 ** 20))
def test_policies_produce_valid_assignments(seed, make_world):
    rng = np.random.default_rng(seed)
    nv, nr = int(rng.integers(0, 6)), int(rng.integers(0, 6))
    vehicles = [(i + 1, rng.uniform(0, 120, 2)) for i in range(nv)]
    busy = {i + 1 for i in range(nv) if rng.random() < 0.3}
    requests = [(i + 1, rng.uniform(0, 120, 2), float(rng.integers(0, 3))) for i in range(nr)]
    w = make_world(vehicles, requests, busy)
    for policy in (schedule_fcfs, schedule_df):
        a = policy(w)
        assert validate_assignment(a, w) == []
        assert a.pairs == policy(w).pairs
    gw = MockGateway(responder=distance_load_responder)
    a = schedule_lmm(w, gw)
    assert validate_assignment(a, w) == []


# ---------------------------------------------------------------------------
# validation

def test_validate_empty(make_world):
    assert validate_assignment(Assignment({}, "x"), make_world()) == []


def test_validate_duplicate_vehicle(make_world):
    w = make_world([(1, (0, 0))], [(1, (1, 1), 0.0), (2, (2, 2), 0.0)])
    problems = validate_assignment(Assignment({1: 1, 2: 1}, "x"), w)
    assert len(problems) == 1 and "vehicle 1" in problems[0]


def test_validate_unknown_request(make_world):
    w = make_world([(1, (0, 0))], [(1, (1, 1), 0.0)])
    problems = validate_assignment(Assignment({42: 1}, "x"), w)
    assert len(problems) == 1 and "42" in problems[0]


def test_validate_reports_every_violation(make_world):
    w = make_world([(1, (0, 0)), (2, (5, 5))], [(1, (1, 1), 0.0)], busy={2})
    w.requests[1].advance(RequestStatus.ASSIGNED)
    problems = validate_assignment(Assignment({1: 2, 7: 9}, "x"), w)
    assert len(problems) == 4


# ---------------------------------------------------------------------------
# gateway-backed

def _lmm_world(make_world):
    return make_world([(1, (0, 0)), (3, (40, 0)), (9, (80, 0))], [(1, (42, 0), 0.0), (2, (2, 0), 0.0)], busy={9})


def test_lmm_pass_through(make_world):
    w = _lmm_world(make_world)
    a = schedule_lmm(w, MockGateway(script=['{"assign": [[1, 3]]}']))
    assert a.pairs == {1: 3} and not a.fallback
    assert a.detail["responses"] == ['{"assign": [[1, 3]]}'] and a.detail["prompt_hash"]


def test_lmm_occupied_vehicle_falls_back(make_world):
    w = _lmm_world(make_world)
    a = schedule_lmm(w, MockGateway(script=['{"assign": [[1, 9]]}']), retries=1)
    assert a.fallback and a.pairs == schedule_df(w).pairs


def test_lmm_malformed_twice_falls_back(make_world):
    w = _lmm_world(make_world)
    gw = MockGateway(script=["no idea", "still no idea", '{"assign": [[1, 3]]}'])
    a = schedule_lmm(w, gw, retries=2)
    assert a.fallback and a.pairs == schedule_df(w).pairs
    assert len(a.detail["errors"]) == 2 and gw.calls["*"] == 2


def test_lmm_retry_then_success(make_world):
    w = _lmm_world(make_world)
    a = schedule_lmm(w, MockGateway(script=["garbage", '{"assign": [[2, 1]]}']), retries=2)
    assert a.pairs == {2: 1} and not a.fallback


def test_lmm_gateway_down_falls_back(make_world):
    w = _lmm_world(make_world)
    a = schedule_lmm(w, MockGateway(script=["x"], failures=5, max_retries=2))
    assert a.fallback and a.pairs == schedule_df(w).pairs
    assert "failed" in a.detail["errors"][0]


def test_lmm_records_exemplar_and_uses_memory(make_world):
    w = _lmm_world(make_world)
    mem = MemoryStore(5)
    gw = MockGateway(responder=distance_load_responder)
    schedule_lmm(w, gw, mem)
    assert len(mem) == 1
    schedule_lmm(w, gw, mem)
    assert len(gw.log[1].request["exemplars"]) == 1


def test_distance_load_responder_serves_oldest(make_world):
    w = make_world([(1, (0, 0))], [(1, (100, 0), 0.0), (2, (1, 0), 5.0)])
    from amodsim import bev
    bundle = bev.compose_prompt(None, "scheduling", w)
    text = distance_load_responder(bundle)
    assert json.loads(text.split("```json")[1].split("```")[0]) == {"assign": [[1, 1]]}
