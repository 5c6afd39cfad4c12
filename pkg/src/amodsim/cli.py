"""Command line entry point: ``amodsim run | bench | replay``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import sim


def _config(args, **extra) -> sim.EpisodeConfig:
    return sim.load_scenario(args.scenario, seed=args.seed, steps=args.steps,
                             verbose_solver=args.verbose_solver or None, **extra)


def cmd_run(args) -> int:
    gateway = {"mode": args.gateway}
    if args.mock_script:
        gateway["script_path"] = args.mock_script
    cfg = _config(args, scheduler=args.scheduler, evolver=args.evolver, out=args.out, gateway=gateway)
    rep = sim.run_episode(cfg)
    print(rep.to_json(timing=False))
    if rep.cycle_times:
        mean = sum(rep.cycle_times) / len(rep.cycle_times)
        print(f"mean OCP time per cycle: {mean:.4f} s over {len(rep.cycle_times)} cycles", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    seeds = list(range(args.seed, args.seed + args.episodes))
    configs = {}
    for name in args.schedulers:
        configs[f"{name}+{args.evolver}"] = _config(args, scheduler=name, evolver=args.evolver, frames=False)
    for name in args.evolvers:
        label = f"{args.schedulers[0]}+{name}"
        if label not in configs:
            configs[label] = _config(args, scheduler=args.schedulers[0], evolver=name, frames=False)
    res = sim.run_benchmark(configs, seeds, out=args.out)
    print(res.table())
    for label in sorted(res.cycle_times):
        flat = [t for seq in res.cycle_times[label].values() for t in seq]
        if flat:
            print(f"{label}: mean OCP time per cycle {sum(flat) / len(flat):.4f} s")
    return 0


def cmd_replay(args) -> int:
    print(json.dumps(sim.replay(args.out, frames=args.frames), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amodsim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", default="grid10", help="JSON scenario file or bundled scenario name")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None, help="step budget")
        p.add_argument("--verbose-solver", action="store_true", help="write per-iteration solver records")

    run = sub.add_parser("run", help="run one episode")
    common(run)
    run.add_argument("--scheduler", choices=["fcfs", "df", "lmm"], default="df")
    run.add_argument("--evolver", choices=["manhattan", "lmm", "none"], default="manhattan")
    run.add_argument("--gateway", choices=["mock", "live"], default="mock")
    run.add_argument("--mock-script", default=None, help="JSON list or {variant: list} of canned responses")
    run.add_argument("--out", default=None, help="output directory for logs, frames and report")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="compare schedulers / evolvers on shared seeds")
    common(bench)
    bench.add_argument("--schedulers", nargs="+", default=["fcfs", "df"], choices=["fcfs", "df", "lmm"])
    bench.add_argument("--evolver", choices=["manhattan", "lmm", "none"], default="manhattan")
    bench.add_argument("--evolvers", nargs="*", default=[], choices=["manhattan", "lmm", "none"],
                       help="extra evolvers to run with the first scheduler")
    bench.add_argument("--episodes", type=int, default=4)
    bench.add_argument("--out", default="bench_out")
    bench.set_defaults(func=cmd_bench)

    rp = sub.add_parser("replay", help="recompute metrics from a run directory")
    rp.add_argument("--out", required=True, help="run directory written by 'run --out'")
    rp.add_argument("--frames", action="store_true", help="redraw a frame per logged cycle")
    rp.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "replay" and args.seed is None:
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
