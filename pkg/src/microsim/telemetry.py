"""Usage history, response-time finalization, QoS aggregation and export."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

REQUESTS_HEADER = ["req_id", "api", "arrival_s", "response_ms", "cp_estimate_ms", "slo_violated", "critical_path"]
USAGE_HEADER = ["t_s", "entity_kind", "entity_id", "cpu_milicores", "ram_mb", "bw_mbps", "n_executing"]
RPS_HEADER = ["t_s", "api", "rps"]
SCALING_HEADER = ["t_s", "service", "direction", "outcome", "replicas_after", "limits_after"]

PATH_SEP = ">"


class IncompleteRequest(RuntimeError):
    pass


# -- usage -------------------------------------------------------------------


@dataclass(slots=True)
class UsageRecord:
    t: float
    instance: str
    cpu_usage: float
    ram_usage: float
    bw_usage: float
    n_executing: int
    entity_kind: str = "instance"


def cpu_per_cloudlet(requested_shares: float, usage_cfg) -> float:
    if usage_cfg.cpu_per_cloudlet is not None:
        return usage_cfg.cpu_per_cloudlet
    return requested_shares / usage_cfg.parallelism


def idle_cpu(instance, usage_cfg) -> float:
    return usage_cfg.idle_cpu_floor + usage_cfg.idle_cpu_fraction * instance.requested_shares


def update_usage(instance, t: float, n_executing: int, usage_cfg, derivations_in_window: int = 0) -> UsageRecord:
    """Linear usage model: resource use grows with the cloudlets in flight."""
    cpu = idle_cpu(instance, usage_cfg) + cpu_per_cloudlet(instance.requested_shares, usage_cfg) * n_executing
    cpu = min(instance.limit_shares, cpu)
    ram = min(instance.limit_ram, usage_cfg.idle_ram_floor + usage_cfg.ram_per_cloudlet * n_executing)
    bw = usage_cfg.bw_per_derivation * derivations_in_window
    if instance.bandwidth > 0:
        bw = min(instance.bandwidth, bw)
    return UsageRecord(t, instance.id, cpu, ram, bw, n_executing)


class UsageMeter:
    """Exact time integrals of an instance's usage, accrued on every change.

    ``area_cpu`` is the integral of CPU milicores, ``area_util`` the
    integral of CPU/limit, ``area_n`` the integral of executing cloudlets.
    """

    __slots__ = (
        "instance_id", "slope", "floor", "cap", "ram_slope", "ram_floor", "ram_cap",
        "last", "born", "area_n", "area_cpu", "area_util", "area_ram",
        "derivations", "window_mark", "derivation_mark",
    )

    def __init__(self, instance, usage_cfg, t: float = 0.0):
        self.instance_id = instance.id
        self.last = t
        self.born = t
        self.area_n = 0.0
        self.area_cpu = 0.0
        self.area_util = 0.0
        self.area_ram = 0.0
        self.derivations = 0
        self.derivation_mark = 0
        self.window_mark = (t, 0.0)
        self.configure(instance, usage_cfg)

    def configure(self, instance, usage_cfg) -> None:
        self.slope = cpu_per_cloudlet(instance.requested_shares, usage_cfg)
        self.floor = idle_cpu(instance, usage_cfg)
        self.cap = instance.limit_shares
        self.ram_slope = usage_cfg.ram_per_cloudlet
        self.ram_floor = usage_cfg.idle_ram_floor
        self.ram_cap = instance.limit_ram

    def cpu(self, n: int) -> float:
        v = self.floor + self.slope * n
        return v if v < self.cap else self.cap

    def ram(self, n: int) -> float:
        v = self.ram_floor + self.ram_slope * n
        return v if v < self.ram_cap else self.ram_cap

    def accrue(self, t: float, n: int) -> None:
        dt = t - self.last
        if dt > 0.0:
            cpu = self.floor + self.slope * n
            if cpu > self.cap:
                cpu = self.cap
            self.area_n += n * dt
            self.area_cpu += cpu * dt
            self.area_util += cpu / self.cap * dt if self.cap > 0 else 0.0
            ram = self.ram_floor + self.ram_slope * n
            self.area_ram += (ram if ram < self.ram_cap else self.ram_cap) * dt
            self.last = t

    def window_utilization(self, t: float) -> float | None:
        """Mean CPU utilization since the previous call; resets the window."""
        t0, util0 = self.window_mark
        self.window_mark = (t, self.area_util)
        if t <= t0:
            return None
        return (self.area_util - util0) / (t - t0)


@dataclass
class UsageHistory:
    records: list[UsageRecord] = field(default_factory=list)

    def append(self, rec: UsageRecord) -> None:
        self.records.append(rec)

    def for_entity(self, entity_id: str) -> list[UsageRecord]:
        return [r for r in self.records if r.instance == entity_id]


# -- response time and critical path -------------------------------------------


def find_critical_path(
    chains: Sequence[Sequence[str]], delay: Mapping[str, float]
) -> tuple[float, tuple[str, ...]]:
    """Longest chain by summed node delay; the first chain wins ties."""
    if not chains:
        raise ValueError("no chains")
    best_path = tuple(chains[0])
    best = sum(delay[n] for n in best_path)
    for path in chains[1:]:
        d = 0.0
        for node in path:
            d += delay[node]
        if d > best:
            best, best_path = d, tuple(path)
    return best, best_path


@dataclass(slots=True)
class Finalized:
    response_ms: float
    critical_path: tuple[str, ...]
    cp_estimate_ms: float

    @property
    def discrepancy_ms(self) -> float:
        return self.response_ms - self.cp_estimate_ms


def finalize_request(request, cloudlets: Iterable, chains: Sequence[tuple[str, ...]],
                     include_wait: bool = True) -> Finalized:
    """Response time and critical path for a finished request.

    Each cloudlet stands for one call path from the entry service, so a
    leaf cloudlet's ancestry is exactly one chain; the chain's delay is
    the sum of per-cloudlet delays along it.
    """
    cum: dict[int, float] = {}
    best_delay = -math.inf
    best_index = -1
    last_finish = -math.inf
    # ids grow with creation time, so parents come before children
    for c in sorted(cloudlets, key=lambda c: c.id):
        if c.status != 2:
            raise IncompleteRequest(f"cloudlet {c.id} of request {request.id} not finished")
        d = (c.finished_at - c.created_at) if include_wait else (c.finished_at - c.started_at)
        total = d + (cum[c.parent.id] if c.parent is not None else 0.0)
        cum[c.id] = total
        if c.finished_at > last_finish:
            last_finish = c.finished_at
        if not c.children and (total > best_delay or (total == best_delay and c.chain_index < best_index)):
            best_delay, best_index = total, c.chain_index
    if best_index < 0:
        raise IncompleteRequest(f"request {request.id} has no finished leaf cloudlet")
    return Finalized(
        response_ms=(last_finish - request.arrival) * 1000.0,
        critical_path=tuple(chains[best_index]),
        cp_estimate_ms=best_delay * 1000.0,
    )


# -- aggregation ---------------------------------------------------------------


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile."""
    if not values:
        return float("nan")
    xs = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(xs)))
    return xs[rank - 1]


@dataclass
class ApiStats:
    api: str
    count: int = 0
    completed: int = 0
    failed: int = 0
    in_flight: int = 0
    mean_ms: float = float("nan")
    median_ms: float = float("nan")
    p95_ms: float = float("nan")
    p99_ms: float = float("nan")
    slo_violations: int = 0
    rps: list[int] = field(default_factory=list)

    @property
    def slo_violation_rate(self) -> float:
        return self.slo_violations / self.completed if self.completed else 0.0

    @property
    def mean_rps(self) -> float:
        return sum(self.rps) / len(self.rps) if self.rps else 0.0


@dataclass
class ResourceMeans:
    cpu_milicores: float = 0.0
    ram_mb: float = 0.0
    executing: float = 0.0
    instance_seconds: float = 0.0


@dataclass
class QosReport:
    apis: dict[str, ApiStats]
    total_requests: int
    completed: int
    failed: int
    in_flight: int
    starved_cloudlets: int
    cloudlets_created: int
    sim_time: float
    resources: ResourceMeans
    scaling: list = field(default_factory=list)
    failed_allocations: list[str] = field(default_factory=list)
    migrations: int = 0
    policy: str = "none"
    mean_response_ms: float = float("nan")


def rps_series(completion_times: Iterable[float], horizon: float, window: float = 1.0) -> list[int]:
    n = int(math.floor(horizon / window)) + 1 if horizon >= 0 else 0
    counts = [0] * n
    for t in completion_times:
        k = int(t // window)
        if 0 <= k < n:
            counts[k] += 1
    return counts


def aggregate(requests: Sequence, api_names: Sequence[str], slo_threshold_ms: float,
              horizon: float, window: float = 1.0) -> dict[str, ApiStats]:
    stats = {name: ApiStats(name) for name in api_names}
    lat: dict[str, list[float]] = defaultdict(list)
    done: dict[str, list[float]] = defaultdict(list)
    for r in requests:
        s = stats[r.api]
        s.count += 1
        if r.status == "Completed":
            s.completed += 1
            lat[r.api].append(r.response_time)
            done[r.api].append(r.arrival + r.response_time / 1000.0)
            if r.response_time > slo_threshold_ms:
                s.slo_violations += 1
        elif r.status == "Failed":
            s.failed += 1
        else:
            s.in_flight += 1
    for name, s in stats.items():
        xs = lat[name]
        if xs:
            s.mean_ms = sum(xs) / len(xs)
            s.median_ms = percentile(xs, 50)
            s.p95_ms = percentile(xs, 95)
            s.p99_ms = percentile(xs, 99)
        s.rps = rps_series(done[name], horizon, window)
    return stats


# -- export --------------------------------------------------------------------


def _f(x: float | None, digits: int = 6) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.{digits}f}"


def _write_csv(path: Path, header: list[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def request_rows(requests: Sequence, slo_threshold_ms: float) -> list[list[str]]:
    rows = []
    for r in requests:
        completed = r.status == "Completed"
        rows.append([
            str(r.id), r.api, _f(r.arrival),
            _f(r.response_time) if completed else "",
            _f(r.cp_estimate) if completed else "",
            ("1" if r.response_time > slo_threshold_ms else "0") if completed else "",
            PATH_SEP.join(r.critical_path) if completed and r.critical_path else "",
        ])
    return rows


def summary_text(report: QosReport) -> str:
    out = io.StringIO()
    p = lambda *a: print(*a, file=out)  # noqa: E731
    p(f"policy               {report.policy}")
    p(f"simulated time (s)   {report.sim_time:.3f}")
    p(f"requests             {report.total_requests}")
    p(f"completed            {report.completed}")
    p(f"failed               {report.failed}")
    p(f"in flight            {report.in_flight}")
    p(f"cloudlets created    {report.cloudlets_created}")
    p(f"starved cloudlets    {report.starved_cloudlets}")
    p(f"migrations           {report.migrations}")
    p(f"scaling decisions    {len(report.scaling)}")
    p(f"mean response (ms)   {_f(report.mean_response_ms, 3)}")
    p("")
    p(f"{'api':<24}{'count':>8}{'done':>8}{'fail':>6}{'mean_ms':>12}{'p50_ms':>12}"
      f"{'p95_ms':>12}{'p99_ms':>12}{'slo_viol':>10}{'mean_rps':>10}")
    for s in report.apis.values():
        p(f"{s.api:<24}{s.count:>8}{s.completed:>8}{s.failed:>6}{_f(s.mean_ms, 2):>12}"
          f"{_f(s.median_ms, 2):>12}{_f(s.p95_ms, 2):>12}{_f(s.p99_ms, 2):>12}"
          f"{s.slo_violation_rate:>10.4f}{s.mean_rps:>10.3f}")
    p("")
    r = report.resources
    p("resource means (time-weighted, per instance)")
    p(f"  cpu_milicores      {r.cpu_milicores:.4f}")
    p(f"  ram_mb             {r.ram_mb:.4f}")
    p(f"  executing          {r.executing:.4f}")
    p(f"  instance_seconds   {r.instance_seconds:.4f}")
    return out.getvalue()


def export(report: QosReport, requests: Sequence, usage: Sequence[UsageRecord],
           out_dir: Path, slo_threshold_ms: float) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create {out}: {exc.strerror}") from None
    paths = {name: out / name for name in ("requests.csv", "usage.csv", "rps.csv", "scaling.csv", "summary.txt")}
    _write_csv(paths["requests.csv"], REQUESTS_HEADER, request_rows(requests, slo_threshold_ms))
    _write_csv(paths["usage.csv"], USAGE_HEADER, (
        [_f(u.t, 3), u.entity_kind, u.instance, _f(u.cpu_usage, 4), _f(u.ram_usage, 4),
         _f(u.bw_usage, 4), str(u.n_executing)]
        for u in usage
    ))
    rps_rows = []
    for s in report.apis.values():
        for k, v in enumerate(s.rps):
            rps_rows.append([str(k), s.api, str(v)])
    rps_rows.sort(key=lambda r: (int(r[0]), r[1]))
    _write_csv(paths["rps.csv"], RPS_HEADER, rps_rows)
    _write_csv(paths["scaling.csv"], SCALING_HEADER, (
        [_f(d.t, 3), d.service, d.direction, d.outcome, str(d.replicas_after), _f(d.limits_after, 3)]
        for d in report.scaling
    ))
    paths["summary.txt"].write_text(summary_text(report))
    return list(paths.values())


__all__ = [
    "UsageRecord", "UsageMeter", "UsageHistory", "update_usage", "cpu_per_cloudlet", "idle_cpu",
    "find_critical_path", "finalize_request", "Finalized", "IncompleteRequest",
    "percentile", "ApiStats", "QosReport", "ResourceMeans", "aggregate", "rps_series",
    "export", "summary_text", "request_rows",
    "REQUESTS_HEADER", "USAGE_HEADER", "RPS_HEADER", "SCALING_HEADER",
]
