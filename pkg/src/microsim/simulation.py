"""Wires the kernel, workload, schedulers, policies and telemetry into one run."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .engine import EventKind, SimEvent, SimSummary, Simulator
from .model import Deployment
from .policies import (
    APPLIED, DOWN, IN, OUT, SCALING_POLICIES, UP, InvariantViolation, Migration, Provisioner,
    ScalingDecision, allocate_all, migration_check, retire_instance, scaling_trigger,
)
from .registry import Scenario, ScenarioConfig
from .scheduling import CloudletScheduler, InstanceExecutor, LengthSampler, SchedulingSystem
from .telemetry import (
    QosReport, ResourceMeans, UsageMeter, UsageRecord, aggregate, export,
)
from .workload import COMPLETED, Request, RequestGenerator, dispatch

log = logging.getLogger(__name__)


@dataclass
class SimulationResult:
    config: ScenarioConfig
    requests: list[Request]
    report: QosReport
    usage: list[UsageRecord]
    summary: SimSummary
    deployment: Deployment
    provisioner: Provisioner
    decisions: list[ScalingDecision] = field(default_factory=list)
    migrations: list[Migration] = field(default_factory=list)
    wall_time: float = 0.0

    def export(self, out_dir: Path) -> list[Path]:
        return export(self.report, self.requests, self.usage, out_dir, self.config.slo_threshold_ms)

    @property
    def events_per_second(self) -> float:
        return self.summary.total / self.wall_time if self.wall_time > 0 else float("inf")


class Simulation:
    def __init__(self, scenario: Scenario, config: ScenarioConfig | None = None, debug: bool = False):
        cfg = (config or scenario.config).validate()
        self.cfg = cfg
        if cfg.scaling.policy not in SCALING_POLICIES:
            raise KeyError(f"unknown scaling policy {cfg.scaling.policy!r}")
        self.policy = SCALING_POLICIES[cfg.scaling.policy]
        self.debug = debug
        self.sim = Simulator(cfg.seed)
        self.deployment = scenario.deployment()
        self.graph = self.deployment.graph
        self.prov = Provisioner(self.deployment.vms.values(), cfg.usage.gate_bandwidth)
        self.allocation = allocate_all(self.deployment, self.prov)
        for svc, ok in self.allocation.items():
            if not ok:
                log.warning("service %s could not be deployed", svc)

        rng = self.sim.rng
        c = cfg.cloudlet
        self.sampler = LengthSampler(rng, c.mean_length, c.std_dev, c.overrides)
        self.system = SchedulingSystem(
            self.graph, self.sampler, cfg.scheduler, cfg.include_wait_in_delay, on_admit=self._mark_dirty,
        )
        self.system.on_request_done = self._request_done
        self._dirty: dict[str, CloudletScheduler] = {}
        self._start_pending = False
        self.retired_meters: list[UsageMeter] = []
        for inst in self.deployment.instances.values():
            if inst.host_vm is not None:
                self._attach(inst.id, 0.0)

        self.generator = RequestGenerator(cfg.generator, list(self.graph.apis.values()), rng)
        self.entry = {name: api.entry_service for name, api in self.graph.apis.items()}
        self.requests: list[Request] = []
        self.in_flight = 0
        self.undispatched = 0
        self.usage: list[UsageRecord] = []
        self.decisions: list[ScalingDecision] = []
        self.migrations: list[Migration] = []
        self.util_history: dict[str, list[float]] = {s: [] for s in self.graph.services}

        sim = self.sim
        handlers = {
            EventKind.GENERATE: self._on_generate,
            EventKind.DISPATCH: self._on_dispatch,
            EventKind.START_EXECUTION: self._on_start,
            EventKind.CLOUDLET_COMPLETE: self._on_complete,
            EventKind.SCALING_CHECK: self._on_scaling,
            EventKind.MIGRATION_CHECK: self._on_migration,
            EventKind.METRICS_SAMPLE: self._on_metrics,
            EventKind.END_SIMULATION: lambda ev: sim.stop(),
        }
        for kind, fn in handlers.items():
            sim.register(kind, self._checked(fn) if debug else fn)

    # -- plumbing -------------------------------------------------------------

    def _checked(self, fn):
        def run(ev: SimEvent) -> None:
            fn(ev)
            self.check_invariants()
        return run

    def check_invariants(self) -> None:
        self.prov.check(self.deployment)
        try:
            self.deployment.check_consistency()
        except AssertionError as exc:
            raise InvariantViolation(f"mapping inconsistency: {exc}") from None
        for sched in self.system.schedulers.values():
            if not sched.conservation_ok():
                raise InvariantViolation(f"queue conservation broken for {sched.service}")
            allowed = set(self.deployment.service_instances[sched.service])
            for ex in sched.executors:
                if ex.instance_id not in allowed:
                    raise InvariantViolation(f"{ex.instance_id} runs cloudlets of unmapped {sched.service}")

    def _mips(self, inst_id: str) -> float:
        inst = self.deployment.instances[inst_id]
        return self.deployment.vms[inst.host_vm].shares_to_mips(inst.limit_shares)

    def _attach(self, inst_id: str, t: float) -> None:
        inst = self.deployment.instances[inst_id]
        ex = InstanceExecutor(inst_id, self._mips(inst_id), UsageMeter(inst, self.cfg.usage, t))
        ex.last = t
        self.system.attach(ex, self.deployment.instance_services[inst_id])
        for s in ex.services:
            sched = self.system.schedulers[s]
            if len(sched):
                self._mark_dirty(sched)

    def _retire(self, ex: InstanceExecutor, t: float) -> None:
        ex.meter.accrue(t, ex.n)
        self.retired_meters.append(ex.meter)
        self.system.detach(ex.instance_id)
        retire_instance(ex.instance_id, self.deployment, self.prov)

    def _mark_dirty(self, sched: CloudletScheduler) -> None:
        self._dirty[sched.service] = sched
        if not self._start_pending:
            self._start_pending = True
            self.sim.at(self.sim.clock, EventKind.START_EXECUTION)

    def _reschedule(self, ex: InstanceExecutor) -> None:
        ex.version += 1
        if ex.heap:
            t = ex.next_finish_time()
            clock = self.sim.clock
            self.sim.at(t if t > clock else clock, EventKind.CLOUDLET_COMPLETE, (ex, ex.version))

    def _busy(self) -> bool:
        if not self.generator.done or self.undispatched:
            return True
        if self.in_flight == 0:
            return False
        # work that cannot progress (nothing executing) ends the run
        return any(ex.n for ex in self.system.executors.values())

    # -- handlers -------------------------------------------------------------

    def _on_generate(self, ev: SimEvent) -> None:
        t = ev.fire_at
        for req in self.generator.generate_tick(t):
            self.requests.append(req)
            self.undispatched += 1
            self.sim.at(t, EventKind.DISPATCH, req)
        if self.generator.active(t + 1.0):
            self.sim.at(t + 1.0, EventKind.GENERATE)
        else:
            self.generator.done = True

    def _on_dispatch(self, ev: SimEvent) -> None:
        req = ev.payload
        self.undispatched -= 1
        if dispatch(req, self.entry[req.api], self.system, ev.fire_at) is not None:
            self.in_flight += 1

    def _on_start(self, ev: SimEvent) -> None:
        t = ev.fire_at
        dirty, self._dirty = self._dirty, {}
        self._start_pending = False
        touched: dict[str, InstanceExecutor] = {}
        rng = self.sim.rng
        for sched in dirty.values():
            for _, ex in sched.try_start(t, rng):
                touched[ex.instance_id] = ex
        for ex in touched.values():
            self._reschedule(ex)

    def _on_complete(self, ev: SimEvent) -> None:
        ex, version = ev.payload
        if version != ex.version:
            return
        t = ev.fire_at
        done = ex.pop_finished(t)
        if not done:
            # the predicted finish fell just outside the tolerance
            done = ex.pop_finished(t, force=True)
        complete = self.system.complete
        for c in done:
            ex.meter.derivations += len(complete(c, t))
        for sched in ex.indexed_in:
            sched.notify(ex)
        if self.cfg.scheduler.max_concurrency is not None:
            for s in ex.services:
                sched = self.system.schedulers[s]
                if len(sched):
                    self._mark_dirty(sched)
        self._reschedule(ex)
        if ex.draining and ex.n == 0:
            self._retire(ex, t)

    def _request_done(self, req: Request, t: float) -> None:
        req.status = COMPLETED
        req.response_time = (t - req.arrival) * 1000.0
        req.critical_path = self.graph.chains[req.api][req.best_index]
        req.cp_estimate = req.best_delay * 1000.0
        self.in_flight -= 1

    def _schedule_checks(self, t: float) -> None:
        if self.policy.apply is not None:
            self.sim.at(t, EventKind.SCALING_CHECK)
        if self.cfg.migration.vm_overload_threshold is not None:
            self.sim.at(t, EventKind.MIGRATION_CHECK)

    def _on_scaling(self, ev: SimEvent) -> None:
        t = ev.fire_at
        cfg = self.cfg.scaling
        utils: dict[str, float | None] = {}
        for iid, ex in self.system.executors.items():
            ex.meter.accrue(t, ex.n)
            utils[iid] = ex.meter.window_utilization(t)
        for svc in self.graph.services:
            vals = [
                utils[i] for i in self.deployment.service_instances[svc]
                if i in utils and utils[i] is not None and not self.deployment.instances[i].draining
            ]
            if not vals:
                continue
            hist = self.util_history[svc]
            hist.append(sum(vals) / len(vals))
            direction = scaling_trigger(hist, cfg.upper_threshold, cfg.lower_threshold,
                                        cfg.consecutive_breaches, self.policy.up, self.policy.down)
            if direction is None:
                continue
            dec = self.policy.apply(t, svc, direction, self.deployment, self.prov, cfg,
                                    hist[-cfg.consecutive_breaches:], self._load_of)
            self.decisions.append(dec)
            if dec.outcome == APPLIED:
                self._apply_side_effects(dec, t)
                hist.clear()
        self._next_check(t)

    def _load_of(self, inst_id: str) -> int:
        ex = self.system.executors.get(inst_id)
        return ex.n if ex is not None else 0

    def _apply_side_effects(self, dec: ScalingDecision, t: float) -> None:
        for iid in dec.changed:
            if dec.direction == OUT:
                self._attach(iid, t)
            elif dec.direction == IN:
                ex = self.system.executors[iid]
                ex.draining = True
                for sched in ex.indexed_in:
                    sched.notify(ex)
                if ex.n == 0:
                    self._retire(ex, t)
            elif dec.direction in (UP, DOWN):
                ex = self.system.executors[iid]
                ex.set_mips(self._mips(iid), t)
                ex.meter.configure(self.deployment.instances[iid], self.cfg.usage)
                self._reschedule(ex)
                for sched in ex.indexed_in:
                    sched.notify(ex)

    def _on_migration(self, ev: SimEvent) -> None:
        t = ev.fire_at
        moved = migration_check(t, self.deployment, self.prov, self.cfg.migration.vm_overload_threshold)
        for m in moved:
            if m.target is not None:
                ex = self.system.executors[m.instance]
                ex.set_mips(self._mips(m.instance), t)
                self._reschedule(ex)
                for sched in ex.indexed_in:
                    sched.notify(ex)
        self.migrations.extend(moved)
        if self.policy.apply is None:
            self._next_check(t)

    def _next_check(self, t: float) -> None:
        if self._busy():
            self._schedule_checks(t + self.cfg.scaling.check_interval)

    def _on_metrics(self, ev: SimEvent) -> None:
        t = ev.fire_at
        by_vm: dict[str, list[float]] = {}
        for iid, ex in self.system.executors.items():
            m = ex.meter
            m.accrue(t, ex.n)
            inst = self.deployment.instances[iid]
            bw = self.cfg.usage.bw_per_derivation * (m.derivations - m.derivation_mark)
            if inst.bandwidth > 0:
                bw = min(inst.bandwidth, bw)
            rec = UsageRecord(t, iid, m.cpu(ex.n), m.ram(ex.n), bw, ex.n)
            m.derivation_mark = m.derivations
            self.usage.append(rec)
            acc = by_vm.setdefault(inst.host_vm, [0.0, 0.0, 0.0, 0])
            acc[0] += rec.cpu_usage
            acc[1] += rec.ram_usage
            acc[2] += rec.bw_usage
            acc[3] += rec.n_executing
        for vm_id in self.prov.vm_order:
            cpu, ram, bw, n = by_vm.get(vm_id, (0.0, 0.0, 0.0, 0))
            self.usage.append(UsageRecord(t, vm_id, cpu, ram, bw, n, "vm"))
        for sched in self.system.schedulers.values():
            sched.check_starvation(t, self.cfg.scheduler.starvation_timeout)
        if self._busy():
            self.sim.at(t + self.cfg.metrics_sample_interval, EventKind.METRICS_SAMPLE)

    # -- driver ---------------------------------------------------------------

    def run(self, wall_budget: float | None = None) -> SimulationResult:
        wall0 = time.perf_counter()
        cfg = self.cfg
        sim = self.sim
        sim.at(0.0, EventKind.GENERATE)
        if cfg.metrics_sample_interval > 0:
            sim.at(0.0, EventKind.METRICS_SAMPLE)
        self._schedule_checks(cfg.scaling.check_interval)
        if cfg.end_time is not None:
            sim.at(cfg.end_time, EventKind.END_SIMULATION)
        summary = sim.run(wall_budget=wall_budget)
        t_end = sim.clock
        meters = [ex.meter for ex in self.system.executors.values()]
        for ex in self.system.executors.values():
            ex.meter.accrue(t_end, ex.n)
        meters += self.retired_meters
        inst_seconds = sum(m.last - m.born for m in meters)
        means = ResourceMeans(instance_seconds=inst_seconds)
        if inst_seconds > 0:
            means.cpu_milicores = sum(m.area_cpu for m in meters) / inst_seconds
            means.ram_mb = sum(m.area_ram for m in meters) / inst_seconds
            means.executing = sum(m.area_n for m in meters) / inst_seconds
        apis = aggregate(self.requests, list(self.graph.apis), cfg.slo_threshold_ms, t_end)
        completed = [r.response_time for r in self.requests if r.status == COMPLETED]
        failed = sum(1 for r in self.requests if r.status == "Failed")
        starved = sum(s.n_starved for s in self.system.schedulers.values())
        if cfg.metrics_sample_interval <= 0:
            for s in self.system.schedulers.values():
                starved += s.check_starvation(t_end, cfg.scheduler.starvation_timeout)
        report = QosReport(
            apis=apis,
            total_requests=len(self.requests),
            completed=len(completed),
            failed=failed,
            in_flight=len(self.requests) - len(completed) - failed,
            starved_cloudlets=starved,
            cloudlets_created=self.system.created,
            sim_time=t_end,
            resources=means,
            scaling=self.decisions,
            failed_allocations=list(self.prov.failed),
            migrations=sum(1 for m in self.migrations if m.target is not None),
            policy=cfg.scaling.policy,
            mean_response_ms=sum(completed) / len(completed) if completed else float("nan"),
        )
        return SimulationResult(
            config=cfg, requests=self.requests, report=report, usage=self.usage,
            summary=summary, deployment=self.deployment, provisioner=self.prov,
            decisions=self.decisions, migrations=self.migrations,
            wall_time=time.perf_counter() - wall0,
        )


def run_scenario(scenario: Scenario, config: ScenarioConfig | None = None, debug: bool = False) -> SimulationResult:
    return Simulation(scenario, config, debug).run()


__all__ = ["Simulation", "SimulationResult", "run_scenario"]
