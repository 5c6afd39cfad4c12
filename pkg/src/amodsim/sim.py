"""Closed-loop episode: schedule, route, partition, plan per subgraph, execute, repeat."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import admm, dynamics, routing
from .bev import render_bev
from .gateway import (GRAPH_EVOLUTION, REFLECTION, SCHEDULING, GatewayConfig, make_gateway)
from .graph_evolution import Partition, UnionFind, evolve_lmm, evolve_manhattan, manhattan_responder
from .memory import MemoryStore, reflect_on_collision
from .scheduling import (Assignment, distance_load_responder, schedule_df, schedule_fcfs,
                         schedule_lmm)
from .world import (NoMetricsError, Occupancy, RequestStatus, WorldState, build_communication_graph,
                    build_grid_city, compute_metrics, place_vehicles, spawn_request)
from .world import _add_requests

log = logging.getLogger(__name__)

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "scenarios")


@dataclass
class EpisodeConfig:
    scenario: str | None = None
    blocks: tuple = (4, 4)
    block_size: float = 100.0
    drive_side: str = "LHD"
    num_vehicles: int = 10
    initial_requests: int = 10
    spawn_rate: float = 0.0                 # expected new requests per step
    max_requests: int | None = None         # cap on requests ever spawned
    r_tele: float = 30.0
    scheduler: str = "df"                   # fcfs | df | lmm
    evolver: str = "manhattan"              # manhattan | lmm | none
    T_p: int = 15
    T_e: int = 10
    dt: float = 0.1
    steps: int = 3000
    seed: int = 0
    out: str | None = None
    verbose_solver: bool = False
    frames: bool = True
    v_ref: float = 5.0
    threshold: float = 20.0
    max_size: int | None = 4
    d_safe: float = 3.0
    pickup_radius: float = 4.0
    memory_size: int = 50
    top_k: int = 3
    retries: int = 2
    claim_length: float = 20.0
    yield_radius: float = 3.5
    block_radius: float = 3.4
    merge_rounds: int = 3
    planner: dict = field(default_factory=dict)
    gateway: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.T_p < 1 or self.T_e < 1 or self.T_e > self.T_p:
            raise ValueError(f"need 1 <= T_e <= T_p, got T_e={self.T_e}, T_p={self.T_p}")
        if self.scheduler not in ("fcfs", "df", "lmm"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.evolver not in ("manhattan", "lmm", "none"):
            raise ValueError(f"unknown evolver {self.evolver!r}")
        if self.steps < 0 or self.num_vehicles < 1:
            raise ValueError("steps must be >= 0 and at least one vehicle is needed")

    def planner_config(self) -> admm.PlannerConfig:
        return admm.PlannerConfig(**dict({"d_safe": self.d_safe}, **self.planner))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d


def load_scenario(path: str, **overrides) -> EpisodeConfig:
    """Episode configuration from a JSON scenario file; keyword overrides win."""
    if not os.path.exists(path) and os.path.exists(os.path.join(SCENARIO_DIR, path + ".json")):
        path = os.path.join(SCENARIO_DIR, path + ".json")
    with open(path) as fh:
        data = json.load(fh)
    known = {f.name for f in fields(EpisodeConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    if "blocks" in data:
        data["blocks"] = tuple(data["blocks"])
    cfg = EpisodeConfig(scenario=path, **{k: v for k, v in data.items() if k != "scenario"})
    cfg.validate()
    return cfg


@dataclass
class EpisodeReport:
    metrics: tuple | None
    completed: int
    open_requests: int
    spawned: int
    steps: int
    cycles: int
    collision_count: int
    min_distance: float
    fallbacks: dict
    plan_lengths: list
    executed_per_cycle: list
    cycle_times: list = field(default_factory=list)         # critical path across subgraphs, s
    cycle_times_serial: list = field(default_factory=list)  # sum over subgraph solves, s
    subgraph_sizes: list = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["metrics"] = None if self.metrics is None else dict(zip(("T_atc", "T_stc", "T_mtc"), self.metrics))
        if not timing:
            d.pop("cycle_times")
            d.pop("cycle_times_serial")
        return d

    def to_json(self, timing: bool = False) -> str:
        """Serialization used for the report file; wall times are excluded unless asked for."""
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# helpers

def default_responder(threshold: float, max_size):
    evolve = manhattan_responder(threshold, max_size)

    def respond(bundle, variant, index):
        if variant == SCHEDULING:
            return distance_load_responder(bundle)
        if variant == GRAPH_EVOLUTION:
            return evolve(bundle)
        if variant == REFLECTION:
            return "Two vehicles were planned in separate groups; group vehicles that share an intersection."
        raise ValueError(f"no mock response for {variant!r}")
    return respond


def _stream(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def min_pairwise_distance(world: WorldState) -> float:
    pos = np.array([v.z[:2] for v in world.vehicles])
    if len(pos) < 2:
        return math.inf
    d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    d[np.diag_indices(len(pos))] = np.inf
    return float(d.min())


class Episode:
    """Mutable state of one run; :func:`run_episode` drives it."""

    def __init__(self, config: EpisodeConfig, gateway=None):
        config.validate()
        self.cfg = config
        self.params = dynamics.VehicleParams(dt=config.dt)
        self.pcfg = config.planner_config()
        place_rng, self.req_rng = _stream(config.seed, 2)
        graph = build_grid_city(config.blocks, config.block_size, drive_side=config.drive_side)
        self.world = WorldState(graph, place_vehicles(graph, config.num_vehicles, place_rng), dt=config.dt)
        _add_requests(self.world, self.req_rng, config.initial_requests)
        needs_gateway = config.scheduler == "lmm" or config.evolver == "lmm"
        if gateway is None and needs_gateway:
            gcfg = GatewayConfig(**config.gateway)
            responder = default_responder(config.threshold, config.max_size) if gcfg.mode == "mock" else None
            gateway = make_gateway(gcfg, responder)
        self.gateway = gateway
        self.memory = MemoryStore(config.memory_size) if needs_gateway else None
        self.fallbacks = {"scheduler": 0, "evolver": 0, "planner": 0, "reflection": 0}
        self.collisions = 0
        self.min_distance = math.inf
        self.plan_lengths, self.executed, self.cycle_times, self.serial_times, self.sizes = [], [], [], [], []
        self.cycle = 0
        self.out = config.out
        self._logs = {}
        if self.out:
            os.makedirs(self.out, exist_ok=True)
            if config.frames:
                os.makedirs(os.path.join(self.out, "frames"), exist_ok=True)
            with open(os.path.join(self.out, "config.json"), "w") as fh:
                # the output path is left out so reruns elsewhere stay byte-identical
                json.dump({k: v for k, v in config.to_dict().items() if k != "out"}, fh, sort_keys=True, indent=2)

    # -- logging -----------------------------------------------------------
    def _write(self, name: str, record: dict) -> None:
        if not self.out:
            return
        fh = self._logs.get(name)
        if fh is None:
            fh = self._logs[name] = open(os.path.join(self.out, name), "w")
        fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")

    def close(self) -> None:
        for fh in self._logs.values():
            fh.close()
        self._logs = {}

    # -- routing -----------------------------------------------------------
    def _start_node(self, veh) -> int:
        if veh.path is None or not veh.route_nodes:
            return veh.node
        ahead = veh.progress + 2
        for node, idx in zip(veh.route_nodes, veh.node_path_index):
            if idx > ahead:
                return node
        return veh.route_nodes[-1]

    def _route(self, veh, goal: int) -> None:
        graph = self.world.graph
        start = self._start_node(veh)
        path = routing.plan_path(graph, veh.z[:2], start, goal)
        veh.path = path
        veh.route_nodes = list(path.nodes)
        # waypoint index of every route node, searched monotonically
        idx, k = [], 0
        for n in veh.route_nodes:
            k, _ = routing.nearest_waypoint(path, graph.nodes[n], start=k, max_ahead=len(path))
            idx.append(k)
        veh.node_path_index = idx
        veh.progress = 0
        veh.node = goal

    # -- scheduling --------------------------------------------------------
    def schedule(self) -> Assignment:
        w, cfg = self.world, self.cfg
        if cfg.scheduler == "fcfs":
            a = schedule_fcfs(w)
        elif cfg.scheduler == "df":
            a = schedule_df(w)
        else:
            a = schedule_lmm(w, self.gateway, self.memory, cfg.top_k, cfg.retries)
            self.fallbacks["scheduler"] += int(a.fallback)
        for rid, vid in sorted(a.pairs.items()):
            req, veh = w.requests[rid], w.vehicle(vid)
            req.advance(RequestStatus.ASSIGNED)
            req.vehicle_id = vid
            veh.occupancy = Occupancy.EN_ROUTE
            veh.request_id = rid
            self._route(veh, req.pickup_node)
        return a

    def partition(self) -> Partition:
        cfg = self.cfg
        if cfg.evolver == "none":
            ids = [v.id for v in self.world.vehicles]
            return Partition([ids], ids, "monolithic")
        if cfg.evolver == "manhattan":
            return evolve_manhattan(self.world.vehicles, cfg.threshold, cfg.max_size)
        p = evolve_lmm(self.world, self.gateway, self.memory, cfg.top_k, cfg.retries,
                       cfg.threshold, cfg.max_size)
        self.fallbacks["evolver"] += int(p.fallback)
        return p

    # -- references --------------------------------------------------------
    def references(self) -> dict:
        """Per-vehicle references with a priority yield rule on top.

        Each routed vehicle claims the next ``claim_length`` meters of its path,
        cut short where another vehicle currently stands. Vehicles stop short
        of the claims of lower-id vehicles when their own path closes in on
        them, which keeps crossing traffic from locking up.
        """
        cfg = self.cfg
        T, dt = cfg.T_p, cfg.dt
        others_pos = {v.id: v.z[:2].copy() for v in self.world.vehicles}
        refs, claims, info = {}, {}, {}
        for veh in sorted(self.world.vehicles, key=lambda v: v.id):
            if veh.path is None:
                continue
            idx, _ = routing.nearest_waypoint(veh.path, veh.z[:2], start=veh.progress, max_ahead=80)
            veh.progress = idx
            s0 = float(veh.path.arclength[idx])
            arc = veh.path.arclength
            ahead = (arc >= s0) & (arc <= s0 + cfg.claim_length)
            pts = veh.path.waypoints[ahead]
            blockers = np.array([p for vid, p in others_pos.items() if vid != veh.id]).reshape(-1, 2)
            if len(pts) and len(blockers):
                near = np.linalg.norm(pts[:, None] - blockers[None], axis=2).min(axis=1) < cfg.block_radius
                if near.any():
                    pts = pts[:int(np.argmax(near))]
            claims[veh.id] = pts
            info[veh.id] = (idx, s0, arc, ahead)
        for veh in self.world.vehicles:
            if veh.path is None:
                refs[veh.id] = np.tile(np.array([veh.z[0], veh.z[1], veh.z[2], 0.0]), (T + 1, 1))
                continue
            idx, s0, arc, ahead = info[veh.id]
            higher = [claims[h] for h in claims if h < veh.id and len(claims[h])]
            s_stop = None
            if higher:
                claimed = np.vstack(higher)
                here = float(np.linalg.norm(claimed - veh.z[:2], axis=1).min())
                look = (arc >= s0) & (arc <= s0 + cfg.v_ref * dt * T + cfg.yield_radius)
                for k in np.flatnonzero(look):
                    d = float(np.linalg.norm(claimed - veh.path.waypoints[k], axis=1).min())
                    if d < cfg.yield_radius and d < here - 1e-6:
                        s_stop = float(arc[max(k - 1, idx)])
                        break
            ref = routing.build_reference(veh.path, veh.z, T, cfg.v_ref, dt, start=idx, max_ahead=0,
                                          s_stop=s_stop)
            refs[veh.id] = ref.states
        return refs

    # -- planning ----------------------------------------------------------
    def _solve(self, ids, refs, trace):
        w = self.world
        z0 = {i: w.vehicle(i).z.copy() for i in ids}
        warm = {i: w.vehicle(i).controls for i in ids if w.vehicle(i).controls is not None}
        t0 = time.perf_counter()
        plan = admm.solve_subgraph(ids, z0, {i: refs[i] for i in ids}, warm_controls=warm or None,
                                   config=self.pcfg, params=self.params, trace=trace)
        return plan, time.perf_counter() - t0

    def plan(self, partition: Partition, refs: dict):
        trace = None
        if self.cfg.verbose_solver and self.out:
            cyc = self.cycle
            trace = lambda rec: self._write("solver_trace.jsonl", dict(rec, cycle=cyc))
        groups = [list(g) for g in partition.groups]
        plans, crit, serial = {}, 0.0, 0.0
        todo = groups
        for round_ in range(self.cfg.merge_rounds + 1):
            times = []
            for g in todo:
                plan, elapsed = self._solve(g, refs, trace)
                times.append(elapsed)
                self.fallbacks["planner"] += int(plan.fallback)
                for i in g:
                    plans[i] = (tuple(g), plan)
            crit += max(times, default=0.0)
            serial += sum(times)
            if round_ == self.cfg.merge_rounds:
                break
            merged = self._merge_conflicts(groups, plans)
            if merged is None:
                break
            groups, todo = merged
        return plans, groups, crit, serial

    def _merge_conflicts(self, groups, plans):
        """Merge subgraphs whose plans come closer than the safety distance."""
        ids = sorted(plans)
        uf = UnionFind(ids)
        for g in groups:
            for i in g[1:]:
                uf.union(g[0], i)
        states = {i: plans[i][1].states[i][:, :2] for i in ids}
        changed = False
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                if uf.find(i) == uf.find(j):
                    continue
                if np.linalg.norm(states[i] - states[j], axis=1).min() < self.pcfg.d_plan:
                    uf.union(i, j)
                    changed = True
        if not changed:
            return None
        new_groups = uf.groups()
        old = {tuple(sorted(g)) for g in groups}
        todo = [g for g in new_groups if tuple(g) not in old]
        return new_groups, todo

    # -- execution ---------------------------------------------------------
    def _check_service(self) -> None:
        w, r2 = self.world, self.cfg.pickup_radius
        for veh in w.vehicles:
            if veh.request_id is None:
                continue
            req = w.requests[veh.request_id]
            if veh.occupancy is Occupancy.EN_ROUTE and np.linalg.norm(veh.z[:2] - req.pickup) <= r2:
                req.advance(RequestStatus.IN_TRANSIT, w.time)
                veh.occupancy = Occupancy.OCCUPIED
                self._route(veh, req.dropoff_node)
            elif veh.occupancy is Occupancy.OCCUPIED and np.linalg.norm(veh.z[:2] - req.dropoff) <= r2:
                req.advance(RequestStatus.COMPLETED, w.time)
                veh.occupancy = Occupancy.FREE
                veh.request_id = None

    def execute(self, plans: dict) -> float:
        w, cfg = self.world, self.cfg
        lo, hi = self.params.lower, self.params.upper
        cycle_min = math.inf
        controls = {}
        for veh in w.vehicles:
            plan = plans[veh.id][1]
            u = np.clip(plan.controls[veh.id], lo, hi)
            self.plan_lengths.append(len(u))
            controls[veh.id] = u
        executed = 0
        for tau in range(cfg.T_e):
            if w.step >= cfg.steps:
                break
            for veh in w.vehicles:
                veh.z = dynamics.step(veh.z, controls[veh.id][tau], params=self.params)
            w.step += 1
            w.time = round(w.step * cfg.dt, 9)
            executed += 1
            d = min_pairwise_distance(w)
            cycle_min = min(cycle_min, d)
            if d < cfg.d_safe:
                self.collisions += 1
            self._check_service()
            if cfg.spawn_rate > 0:
                spawn_request(w, self.req_rng, cfg.spawn_rate, cfg.max_requests)
        for veh in w.vehicles:
            veh.controls = controls[veh.id][executed:]
        self.executed.append(executed)
        self.min_distance = min(self.min_distance, cycle_min)
        return cycle_min

    def finished(self) -> bool:
        w, cfg = self.world, self.cfg
        if w.step >= cfg.steps:
            return True
        more = cfg.spawn_rate > 0 and (cfg.max_requests is None or w.spawned < cfg.max_requests)
        return not w.open_requests() and not more

    def run_cycle(self) -> None:
        w, cfg = self.world, self.cfg
        assignment = self.schedule()
        if self.out and cfg.frames:
            render_bev(w, SCHEDULING).save(os.path.join(self.out, "frames", f"frame_{self.cycle:04d}_{SCHEDULING}.png"))
        refs = self.references()
        partition = self.partition()
        plans, groups, crit, serial = self.plan(partition, refs)
        self.cycle_times.append(crit)
        self.serial_times.append(serial)
        self.sizes.append([len(g) for g in groups])
        record = {
            "cycle": self.cycle, "step": w.step, "time": w.time,
            "assignment": assignment.to_record(), "partition": partition.to_record(),
            "groups": groups,
            "comm_edges": sorted(build_communication_graph(w.vehicles, cfg.r_tele).edges),
            "solves": _solve_records(plans),
        }
        cycle_min = self.execute(plans)
        record["min_distance"] = cycle_min
        record["executed"] = self.executed[-1]
        record["world"] = w.to_record()
        self._write("cycles.jsonl", record)
        if cycle_min < cfg.d_safe and self.gateway is not None and self.memory is not None:
            entry = reflect_on_collision(self.memory, self.gateway, {
                "image": render_bev(w, GRAPH_EVOLUTION), "min_distance": cycle_min,
                "d_safe": cfg.d_safe, "time": w.time, "decisions": json.dumps(partition.to_record()),
                "variant": GRAPH_EVOLUTION})
            if entry is None:
                self.fallbacks["reflection"] += 1
        self.cycle += 1

    def report(self) -> EpisodeReport:
        w = self.world
        try:
            metrics = tuple(round(m, 9) for m in compute_metrics(w.completed()))
        except NoMetricsError:
            metrics = None
        return EpisodeReport(
            metrics=metrics, completed=len(w.completed()), open_requests=len(w.open_requests()),
            spawned=w.spawned, steps=w.step, cycles=self.cycle, collision_count=self.collisions,
            min_distance=round(self.min_distance, 9) if math.isfinite(self.min_distance) else None,
            fallbacks=dict(self.fallbacks), plan_lengths=self.plan_lengths,
            executed_per_cycle=self.executed, cycle_times=self.cycle_times,
            cycle_times_serial=self.serial_times, subgraph_sizes=self.sizes)


def _solve_records(plans: dict) -> list:
    seen = {}
    for g, plan in plans.values():
        seen[g] = plan
    return [{"ids": list(g), "iterations": p.iterations, "outer": p.outer_passes,
             "residual": None if not math.isfinite(p.residual) else p.residual,
             "converged": p.converged, "fallback": p.fallback} for g, p in sorted(seen.items())]


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def run_episode(config: EpisodeConfig, gateway=None) -> EpisodeReport:
    ep = Episode(config, gateway)
    try:
        while not ep.finished():
            ep.run_cycle()
        rep = ep.report()
        if ep.out:
            with open(os.path.join(ep.out, "report.json"), "w") as fh:
                fh.write(rep.to_json())
            with open(os.path.join(ep.out, "timing.json"), "w") as fh:
                json.dump({"cycle_times": rep.cycle_times, "cycle_times_serial": rep.cycle_times_serial}, fh)
            with open(os.path.join(ep.out, "requests.jsonl"), "w") as fh:
                for r in sorted(ep.world.requests.values(), key=lambda r: r.id):
                    fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
            if ep.memory is not None:
                ep.memory.save(os.path.join(ep.out, "memory"))
    finally:
        ep.close()
    return rep


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchmarkResult:
    rows: list                              # one dict per (label, seed)
    cycle_times: dict                       # label -> seed -> list of per-cycle times
    completion_times: dict                  # label -> list of completion times

    def table(self) -> str:
        """Per-episode metrics, one column group per configuration."""
        labels = sorted({r["label"] for r in self.rows})
        seeds = sorted({r["seed"] for r in self.rows})
        by = {(r["label"], r["seed"]): r for r in self.rows}
        head = "episode | " + " | ".join(f"{lab} T_atc  T_stc  T_mtc" for lab in labels)
        lines = [head, "-" * len(head)]
        for n, s in enumerate(seeds, start=1):
            cells = []
            for lab in labels:
                m = by[(lab, s)]["metrics"]
                cells.append("   -      -      -  " if m is None else f"{m[0]:6.2f} {m[1]:6.2f} {m[2]:6.2f}")
            lines.append(f"Ep{n} (seed {s}) | " + " | ".join(cells))
        return "\n".join(lines)


def run_benchmark(configs: dict, seeds, out: str | None = None, plots: bool = True) -> BenchmarkResult:
    """Run every labelled configuration on the same seeds.

    ``configs`` maps a label to an :class:`EpisodeConfig`; seeds override the
    config's seed so every policy sees the same request stream.
    """
    if len(configs) < 2:
        raise ValueError("a benchmark needs at least two configurations")
    rows, times, completions = [], {}, {}
    for label, base in configs.items():
        for seed in seeds:
            cfg = copy.deepcopy(base)
            cfg.seed = seed
            cfg.out = os.path.join(out, f"{label}_seed{seed}") if out else None
            ep = Episode(cfg)
            try:
                while not ep.finished():
                    ep.run_cycle()
                rep = ep.report()
            finally:
                ep.close()
            rows.append({"label": label, "seed": seed, "metrics": rep.metrics, "completed": rep.completed,
                         "collisions": rep.collision_count, "min_distance": rep.min_distance,
                         "mean_cycle_time": float(np.mean(rep.cycle_times)) if rep.cycle_times else 0.0})
            times.setdefault(label, {})[seed] = rep.cycle_times
            completions.setdefault(label, []).extend(r.completion_time for r in ep.world.completed())
    result = BenchmarkResult(rows, times, completions)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "table.txt"), "w") as fh:
            fh.write(result.table() + "\n")
        with open(os.path.join(out, "rows.json"), "w") as fh:
            json.dump(rows, fh, indent=2, default=_jsonable)
        if plots:
            write_plots(result, out)
    return result


def write_plots(result: BenchmarkResult, out: str) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    labels = sorted(result.cycle_times)
    fig, ax = plt.subplots(figsize=(6, 4))
    data = [[t for seq in result.cycle_times[lab].values() for t in seq] for lab in labels]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel("OCP wall time per cycle [s]")
    fig.tight_layout()
    paths.append(os.path.join(out, "ocp_times.png"))
    fig.savefig(paths[-1])
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(6, 4))
    for lab in labels:
        if result.completion_times.get(lab):
            ax.hist(result.completion_times[lab], bins=15, alpha=0.5, label=lab)
    ax.set_xlabel("task completion time [s]")
    ax.set_ylabel("requests")
    ax.legend()
    fig.tight_layout()
    paths.append(os.path.join(out, "completion_hist.png"))
    fig.savefig(paths[-1])
    plt.close(fig)
    return paths


def replay(out: str, frames: bool = False) -> dict:
    """Recompute metrics from a run directory's request log; optionally redraw frames."""
    with open(os.path.join(out, "requests.jsonl")) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    done = [r for r in records if r["dropoff_time"] is not None]
    times = np.array([r["dropoff_time"] - r["spawn_time"] for r in done], dtype=float)
    result = {"completed": len(done), "requests": len(records)}
    if times.size:
        result.update(T_atc=float(times.mean()), T_stc=float(times.std()), T_mtc=float(times.max()))
    if frames:
        with open(os.path.join(out, "config.json")) as fh:
            cfg = json.load(fh)
        graph = build_grid_city(tuple(cfg["blocks"]), cfg["block_size"], drive_side=cfg["drive_side"])
        from .world import Request, VehicleState
        os.makedirs(os.path.join(out, "replay"), exist_ok=True)
        with open(os.path.join(out, "cycles.jsonl")) as fh:
            for line in fh:
                rec = json.loads(line)
                snap = rec["world"]
                w = WorldState(graph, [VehicleState(id=v["id"], z=np.array(v["z"]), occupancy=Occupancy(v["occupancy"]))
                                       for v in snap["vehicles"]], time=snap["time"], step=snap["step"])
                for r in snap["requests"]:
                    w.requests[r["id"]] = Request(r["id"], tuple(r["pickup"]), tuple(r["dropoff"]), r["spawn_time"],
                                                  status=RequestStatus[r["status"]])
                render_bev(w, SCHEDULING).save(os.path.join(out, "replay", f"step_{snap['step']:05d}.png"))
        result["frames"] = True
    return result
