"""Request-to-vehicle assignment policies: FCFS, Distance-First and gateway-backed."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import bev
from .gateway import SCHEDULING, GatewayError, ParseError, parse_structured
from .memory import retrieve_top_k
from .world import RequestStatus, WorldState

log = logging.getLogger(__name__)


@dataclass
class Assignment:
    pairs: dict                             # request id -> vehicle id
    policy: str
    decision_time: float = 0.0
    fallback: bool = False
    detail: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"policy": self.policy, "time": self.decision_time, "fallback": self.fallback,
                "pairs": [[r, v] for r, v in sorted(self.pairs.items())], **self.detail}


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def fcfs_match(cost, request_ids, vehicle_ids) -> dict:
    """Rows in service order, each to the cheapest remaining column (smaller id on ties)."""
    cost = np.asarray(cost, dtype=float).reshape(len(request_ids), len(vehicle_ids))
    left = sorted(range(len(vehicle_ids)), key=lambda c: vehicle_ids[c])
    pairs = {}
    for row, rid in enumerate(request_ids):
        if not left:
            break
        col = min(left, key=lambda c: (cost[row, c], vehicle_ids[c]))
        pairs[rid] = vehicle_ids[col]
        left.remove(col)
    return pairs


def df_match(cost, request_ids, vehicle_ids) -> dict:
    """Greedy global minimum: commit the cheapest open (row, column) pair until one side runs out."""
    cost = np.asarray(cost, dtype=float).reshape(len(request_ids), len(vehicle_ids))
    cand = sorted((cost[a, b], request_ids[a], vehicle_ids[b])
                  for a in range(len(request_ids)) for b in range(len(vehicle_ids)))
    pairs, used = {}, set()
    for _, rid, vid in cand:
        if rid in pairs or vid in used:
            continue
        pairs[rid] = vid
        used.add(vid)
    return pairs


def _distances(world: WorldState):
    reqs = world.pending()
    free = world.free_vehicles()
    cost = np.array([[_dist(v.z[:2], r.pickup) for v in free] for r in reqs]).reshape(len(reqs), len(free))
    return cost, [r.id for r in reqs], [v.id for v in free]


def schedule_fcfs(world: WorldState) -> Assignment:
    """Oldest request first, each to its nearest free vehicle."""
    return Assignment(fcfs_match(*_distances(world)), "fcfs", world.time)


def schedule_df(world: WorldState) -> Assignment:
    """Repeatedly commit the globally closest (request, free vehicle) pair."""
    return Assignment(df_match(*_distances(world)), "df", world.time)


def validate_assignment(a: Assignment, world: WorldState) -> list:
    """All violations of the assignment rules; empty when valid."""
    problems = []
    vehicles = {v.id: v for v in world.vehicles}
    seen = {}
    for rid, vid in sorted(a.pairs.items()):
        req = world.requests.get(rid)
        if req is None:
            problems.append(f"unknown request {rid}")
        elif req.status is not RequestStatus.PENDING:
            problems.append(f"request {rid} is not pending ({req.status.name})")
        veh = vehicles.get(vid)
        if veh is None:
            problems.append(f"unknown vehicle {vid}")
        elif not veh.is_free:
            problems.append(f"vehicle {vid} is not free")
        seen.setdefault(vid, []).append(rid)
    for vid, rids in sorted(seen.items()):
        if len(rids) > 1:
            problems.append(f"vehicle {vid} assigned to requests {rids}")
    return problems


def schedule_lmm(world: WorldState, gateway, memory=None, k: int = 3, retries: int = 2,
                 image: bev.BevImage | None = None) -> Assignment:
    """Query the gateway with the scheduling view; fall back to DF on failure.

    Up to ``retries`` responses are tried; each must parse and pass
    :func:`validate_assignment`. Gateway unavailability falls back at once.
    """
    if not world.pending() or not world.free_vehicles():
        return Assignment({}, "lmm", world.time)
    image = image if image is not None else bev.render_bev(world, SCHEDULING)
    exemplars = retrieve_top_k(memory, image, k, SCHEDULING) if memory is not None else []
    bundle = bev.compose_prompt(image, SCHEDULING, world, exemplars, max_exemplars=k)
    digest = hashlib.sha256((bundle.system_message + bundle.task_message).encode() + image.to_png()).hexdigest()
    detail = {"prompt_hash": digest[:16], "responses": [], "errors": []}
    for _ in range(max(retries, 1)):
        try:
            ex = gateway.query(bundle, SCHEDULING)
        except GatewayError as exc:
            detail["errors"].append(str(exc))
            break
        detail["responses"].append(ex.response)
        try:
            draft = parse_structured(ex.response, SCHEDULING)
        except ParseError as exc:
            detail["errors"].append(str(exc))
            continue
        a = Assignment(draft, "lmm", world.time, detail=detail)
        problems = validate_assignment(a, world)
        if problems:
            detail["errors"].append("; ".join(problems))
            continue
        if memory is not None:
            memory.add(image, bundle.task_message, ex.response, variant=SCHEDULING)
        return a
    log.info("scheduling falls back to distance-first: %s", detail["errors"][-1:] or "no response")
    fb = schedule_df(world)
    return Assignment(fb.pairs, "lmm", world.time, fallback=True, detail=detail)


def distance_load_responder(bundle, variant=None, index=None) -> str:
    """Offline stand-in for the model's scheduling answer.

    Serves the longest-waiting requests first (as many as there are free
    vehicles) and matches them to vehicles with minimum total distance.
    """
    ctx = bundle.context
    reqs = sorted(ctx.get("requests", []), key=lambda r: (r[2], r[0]))
    vehs = ctx.get("vehicles", [])
    n = min(len(reqs), len(vehs))
    if n == 0:
        return json.dumps({"assign": []})
    reqs = reqs[:n]
    cost = np.array([[_dist(p, v[1]) for v in vehs] for _, p, _ in reqs])
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted([int(reqs[r][0]), int(vehs[c][0])] for r, c in zip(rows, cols))
    return "Serving the longest waiting passengers first.\n```json\n" + json.dumps({"assign": pairs}) + "\n```"


POLICIES = {"fcfs": schedule_fcfs, "df": schedule_df}
