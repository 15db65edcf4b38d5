"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime invariant violation.
Diagnostics go to stderr; stdout carries only the report.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .engine import SchedulingError
from .model import ModelError
from .policies import SCALING_POLICIES, InvariantViolation
from .registry import ConfigError, Scenario, load_scenario_files
from .scenarios import BUILTIN, CAPACITY_CASES, scenario_dir, synthesize_capacity
from .simulation import Simulation
from .telemetry import IncompleteRequest, summary_text
from .workload import predict

OUT_ENV = "MICROSIM_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2

log = logging.getLogger("microsim")


def _add_input_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", help=f"scenario directory or built-in name ({', '.join(BUILTIN)})")
    p.add_argument("--application", type=Path, help="application.json")
    p.add_argument("--instances", type=Path, help="instances.yaml")
    p.add_argument("--cluster", type=Path, help="cluster.json")
    p.add_argument("--config", type=Path, help="scenario.toml")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--policy", help="override the scaling policy")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="-v for progress, -vv for debug logging and per-event invariant checks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microsim", description="Microservice cluster simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and export results")
    _add_input_args(run)
    run.add_argument("--out", type=Path,
                     help=f"output directory (default ${OUT_ENV} or ./out)")

    val = sub.add_parser("validate", help="parse and check a scenario without running it")
    _add_input_args(val)

    pred = sub.add_parser("predict", help="closed-form clients, rate and cumulative requests")
    pred.add_argument("num_clients", type=int)
    pred.add_argument("spawn_rate", type=float)
    pred.add_argument("p0", type=float)
    pred.add_argument("p1", type=float)
    pred.add_argument("-t", "--time", type=float, action="append", dest="times",
                      help="time(s) to evaluate; repeatable (default 0, 10, 60, 600)")

    bench = sub.add_parser("bench", help="time a synthetic capacity case")
    bench.add_argument("case_id", choices=list(CAPACITY_CASES))
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--wall-budget", type=float, metavar="SECONDS",
                       help="stop after this much real time and report progress")
    return parser


def _load(args) -> Scenario:
    explicit = [args.application, args.instances, args.cluster]
    if args.scenario is not None:
        if any(x is not None for x in explicit):
            raise ConfigError("$", "give either --scenario or the individual file flags, not both")
        d = scenario_dir(args.scenario)
        config = args.config
        if config is None and (d / "scenario.toml").exists():
            config = d / "scenario.toml"
        scen = load_scenario_files(d / "application.json", d / "instances.yaml",
                                   d / "cluster.json", config)
    else:
        missing = [n for n, v in zip(("--application", "--instances", "--cluster"), explicit) if v is None]
        if missing:
            raise ConfigError("$", f"missing {', '.join(missing)} (or use --scenario)")
        scen = load_scenario_files(args.application, args.instances, args.cluster, args.config)
    if args.seed is not None:
        scen.config.seed = args.seed
    if args.policy is not None:
        if args.policy not in SCALING_POLICIES:
            raise ConfigError("scaling_policy", f"unknown policy {args.policy!r}")
        scen.config.scaling.policy = args.policy
    return scen


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def cmd_run(args) -> int:
    scen = _load(args)
    out = args.out or Path(os.environ.get(OUT_ENV, "out"))
    log.info("running %s requests at most, policy %s", scen.config.generator.num_limit,
             scen.config.scaling.policy)
    result = Simulation(scen, debug=args.verbose >= 2).run()
    paths = result.export(out)
    sys.stdout.write(summary_text(result.report))
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_validate(args) -> int:
    scen = _load(args)
    graph = scen.graph()
    dep = scen.deployment()
    print(f"services {len(graph.services)}  apis {len(graph.apis)}  "
          f"instances {len(dep.instances)}  vms {len(dep.vms)}")
    for name, chains in graph.chains.items():
        print(f"  {name}: {len(chains)} chains, {graph.cloudlets_per_request(name)} cloudlets per request")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.p0 > args.p1:
        raise ConfigError("wait_interval", f"p0 ({args.p0:g}) exceeds p1 ({args.p1:g})")
    if args.num_clients < 1 or args.spawn_rate <= 0 or args.p1 <= 0 or args.p0 < 0:
        raise ConfigError("$", "need num_clients >= 1, spawn_rate > 0 and 0 <= p0 <= p1, p1 > 0")
    times = args.times or [0.0, 10.0, 60.0, 600.0]
    print(f"{'t_s':>10}{'clients':>12}{'rate_rps':>12}{'cumulative':>14}")
    for t in times:
        if t < 0:
            raise ConfigError("time", "must be >= 0")
        p = predict(t, args.num_clients, args.spawn_rate, args.p0, args.p1)
        print(f"{t:>10g}{p.clients:>12.2f}{p.rate:>12.3f}{p.cumulative:>14.2f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    case = CAPACITY_CASES[args.case_id]
    scen = synthesize_capacity(case, seed=args.seed)
    result = Simulation(scen).run(wall_budget=args.wall_budget)
    print(f"case {case.name}: requests {case.requests}  services {case.services}  "
          f"instances {case.instances}")
    print(f"cloudlets {result.report.cloudlets_created}  completed requests {result.report.completed}")
    print(f"events {result.summary.total}  wall {result.wall_time:.3f} s  "
          f"events/s {result.events_per_second:,.0f}")
    if result.summary.timed_out:
        print(f"stopped at the wall budget, simulated time {result.report.sim_time:.3f} s")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "predict": cmd_predict, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "verbose", 0))
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, IncompleteRequest, SchedulingError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
