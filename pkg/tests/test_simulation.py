from __future__ import annotations

import copy

import pytest

from microsim.engine import EventKind
from microsim.policies import APPLIED
from microsim.scenarios import resolve_scenario, synthesize_capacity, with_clients
from microsim.simulation import Simulation, run_scenario
from microsim.telemetry import finalize_request
from microsim.workload import COMPLETED


def _small_sockshop(sockshop, clients=150, policy=None, seed=None, limit=60.0):
    cfg = with_clients(sockshop, clients, policy=policy, seed=seed)
    cfg.generator.time_limit = limit
    return cfg


def _csv_bytes(result, out):
    return {p.name: p.read_bytes() for p in result.export(out)}


@pytest.mark.parametrize("policy", ["none", "horizontal", "vertical"])
def test_same_seed_same_bytes(sockshop, tmp_path, policy):
    cfg = _small_sockshop(sockshop, policy=policy)
    a = _csv_bytes(Simulation(sockshop, cfg).run(), tmp_path / "a")
    b = _csv_bytes(Simulation(sockshop, copy.deepcopy(cfg)).run(), tmp_path / "b")
    assert a == b


def test_different_seed_different_trace(sockshop):
    r1 = Simulation(sockshop, _small_sockshop(sockshop, seed=1)).run()
    r2 = Simulation(sockshop, _small_sockshop(sockshop, seed=2)).run()
    t1 = [(r.api, r.arrival) for r in r1.requests]
    t2 = [(r.api, r.arrival) for r in r2.requests]
    assert t1 != t2


def test_debug_invariants_hold_under_scaling(sockshop):
    for policy in ("horizontal", "vertical"):
        cfg = _small_sockshop(sockshop, clients=400, policy=policy, limit=90.0)
        cfg.migration.vm_overload_threshold = 0.9
        result = Simulation(sockshop, cfg, debug=True).run()
        assert result.report.completed == result.report.total_requests
        assert any(d.outcome == APPLIED for d in result.decisions)


def test_every_completed_request_checks_out(minimal):
    sim = Simulation(minimal)
    result = sim.run()
    graph = minimal.graph()
    for req in result.requests:
        assert req.status == COMPLETED
        fin = finalize_request(req, req.cloudlets, graph.chains[req.api])
        # the incremental bookkeeping and the standalone pass agree exactly
        assert fin.critical_path == req.critical_path
        assert fin.cp_estimate_ms == req.cp_estimate
        assert fin.response_ms == req.response_time
        assert fin.cp_estimate_ms >= 0 and fin.response_ms > 0
        assert len(req.cloudlets) == graph.cloudlets_per_request(req.api)


def test_no_lost_events(minimal):
    result = Simulation(minimal).run()
    s = result.summary
    assert s.scheduled == s.total + s.remaining
    assert s.processed[EventKind.GENERATE] > 0


@pytest.mark.parametrize("name,loads", [("minimal", (5, 10, 20, 40)), ("sockshop", (60, 120, 240))])
def test_doubling_clients_never_lowers_mean_response(name, loads):
    scen = resolve_scenario(name)
    means = []
    for n in loads:
        cfg = with_clients(scen, n)
        cfg.generator.time_limit = min(cfg.generator.time_limit, 120.0)
        means.append(Simulation(scen, cfg).run().report.mean_response_ms)
    assert means == sorted(means)


def test_horizontal_scaling_cuts_cpu_and_vertical_adds(sockshop):
    usage = {}
    for policy in ("none", "horizontal", "vertical"):
        cfg = _small_sockshop(sockshop, clients=300, policy=policy, limit=120.0)
        usage[policy] = run_scenario(sockshop, cfg).report.resources.cpu_milicores
    assert usage["horizontal"] < usage["none"] < usage["vertical"]


def test_wall_budget_reports_timeout():
    result = Simulation(synthesize_capacity("1a")).run(wall_budget=0.2)
    assert result.summary.timed_out
    assert result.report.in_flight > 0


def test_end_time_stops_early(minimal):
    cfg = copy.deepcopy(minimal.config)
    cfg.end_time = 10.0
    result = Simulation(minimal, cfg).run()
    assert result.report.sim_time == 10.0
    assert all(r.arrival <= 10.0 for r in result.requests)


def test_entry_without_instances_fails_requests(minimal):
    scen = copy.deepcopy(minimal)
    # no VM can fit anything
    for vm in scen.vms:
        vm.ram = 1.0
    result = Simulation(scen).run()
    assert result.report.failed == result.report.total_requests > 0
    assert result.report.completed == 0
