"""Bundled example scenarios and synthetic capacity workloads."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

from .model import Api, InstanceSpec, ReplicaSet, Service, Vm
from .registry import ConfigError, Scenario, ScenarioConfig, load_scenario_dir, load_scenario_files

SCENARIO_ROOT = Path(__file__).parent / "scenarios"
BUILTIN = ("minimal", "sockshop")


def builtin_path(name: str) -> Path:
    if name not in BUILTIN:
        raise ConfigError("$", f"unknown built-in scenario {name!r} (choose from {', '.join(BUILTIN)})")
    return SCENARIO_ROOT / name


def scenario_dir(ref: str | Path) -> Path:
    """A scenario directory, or a bundled one by name (``examples/sockshop`` works too)."""
    p = Path(ref)
    if p.is_dir():
        return p
    return builtin_path(p.name)


def resolve_scenario(ref: str | Path) -> Scenario:
    return load_scenario_dir(scenario_dir(ref))


def with_clients(scenario: Scenario, num_clients: int, policy: str | None = None,
                 seed: int | None = None) -> ScenarioConfig:
    cfg = copy.deepcopy(scenario.config)
    cfg.generator.num_clients = num_clients
    if policy is not None:
        cfg.scaling.policy = policy
    if seed is not None:
        cfg.seed = seed
    return cfg


# -- testbed-shaped calibration ---------------------------------------------------

# Client counts of the reference load test and the mean response times
# (ms) measured there at the lowest and highest load.
TESTBED_CLIENTS = (100, 150, 200, 250, 300)
TESTBED_ENDPOINTS_MS = (749.0, 2574.0)


def testbed_scenario() -> Scenario:
    """Sockshop graph with the parameter set tuned to the reference curve."""
    d = SCENARIO_ROOT / "sockshop"
    return load_scenario_files(
        d / "application.json", d / "instances.yaml", d / "cluster.json", d / "testbed.toml",
    )


# -- capacity cases ---------------------------------------------------------------


@dataclass(frozen=True)
class CapacityCase:
    name: str
    requests: int
    services: int
    instances: int

    @property
    def cloudlets(self) -> int:
        # each service appears once in a call tree, so once per request
        return self.requests * self.services


CAPACITY_CASES: dict[str, CapacityCase] = {
    c.name: c
    for c in (
        CapacityCase("smoke", 100, 10, 10),
        CapacityCase("1a", 10**5, 1, 10**3),
        CapacityCase("1b", 10**6, 1, 10**3),
        CapacityCase("2a", 10**3, 5 * 10**3, 1),
        CapacityCase("2b", 10**3, 5 * 10**4, 1),
        CapacityCase("3a", 10**4, 10**2, 3 * 10**2),
        CapacityCase("3b", 10**4, 10**3, 3 * 10**3),
        CapacityCase("4a", 10**3, 5 * 10**3, 15 * 10**3),
        CapacityCase("4b", 10**4, 5 * 10**3, 15 * 10**3),
    )
}

FAN_OUT = 4
ARRIVAL_TICKS = 10
TARGET_BUSY = 0.5


def synthesize_capacity(case: CapacityCase | str, seed: int = 0) -> Scenario:
    """A call tree of ``case.services`` nodes served by ``case.instances`` instances.

    Service i calls services FAN_OUT*i+1 .. FAN_OUT*i+FAN_OUT, so every
    request touches each service once. Instances are spread round-robin
    over services; with fewer instances than services, one instance
    carries a shared label and serves them all. Arrivals are spread over
    ARRIVAL_TICKS seconds and lengths are set so instances run about half
    busy.
    """
    if isinstance(case, str):
        case = CAPACITY_CASES[case]
    S, I, R = case.services, case.instances, case.requests
    names = [f"s{i}" for i in range(S)]
    shared = I < S
    services = []
    for i, name in enumerate(names):
        calls = tuple(names[c] for c in range(FAN_OUT * i + 1, min(S, FAN_OUT * i + FAN_OUT + 1)))
        labels = {name, "shared"} if shared else {name}
        services.append(Service(name, frozenset(labels), calls))
    apis = [Api("GET /", names[0], 1.0)]

    template_kw = dict(requested_shares=100.0, limit_shares=1000.0, requested_ram=64.0,
                       limit_ram=128.0, bandwidth=0.0)
    replica_sets: list[ReplicaSet] = []
    if shared:
        for k in range(I):
            rs = ReplicaSet(f"shared-{k}", InstanceSpec(labels=frozenset({"shared"}), **template_kw))
            rs.replicas.append(rs.mint().id)
            replica_sets.append(rs)
    else:
        per = [I // S + (1 if i < I % S else 0) for i in range(S)]
        for name, n in zip(names, per):
            rs = ReplicaSet(name, InstanceSpec(labels=frozenset({name}), **template_kw),
                            min_replicas=n, max_replicas=n)
            for _ in range(n):
                rs.replicas.append(rs.mint().id)
            replica_sets.append(rs)

    per_vm = 160  # 16 cores of 100-share requests
    n_vms = -(-I // per_vm)
    vms = [Vm(f"vm-{k}", 1000.0, 16, 64 * 1024.0, 10_000.0) for k in range(n_vms)]

    # cloudlets landing on one instance per simulated second
    per_instance_rate = R * S / (ARRIVAL_TICKS * I)
    length = TARGET_BUSY * 1000.0 / per_instance_rate

    cfg = ScenarioConfig(seed=seed)
    g = cfg.generator
    g.num_clients = max(1, R // ARRIVAL_TICKS)
    g.spawn_rate = float(g.num_clients)
    g.wait_min = g.wait_max = 1.0
    g.time_limit = ARRIVAL_TICKS + 1.0
    g.num_limit = float(R)
    g.initial_phase = "immediate"
    cfg.cloudlet.mean_length = length
    cfg.cloudlet.std_dev = 0.2 * length
    cfg.scheduler.retain_finished = False
    cfg.metrics_sample_interval = 0.0
    cfg.max_paths = max(cfg.max_paths, S)
    return Scenario(apis, services, replica_sets, vms, cfg)


__all__ = [
    "BUILTIN", "SCENARIO_ROOT", "builtin_path", "scenario_dir", "resolve_scenario", "with_clients",
    "CapacityCase", "CAPACITY_CASES", "synthesize_capacity", "testbed_scenario",
    "TESTBED_CLIENTS", "TESTBED_ENDPOINTS_MS",
]
