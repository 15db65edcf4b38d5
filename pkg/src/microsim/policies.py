"""Placement, migration and autoscaling policies over a shared provisioner."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .model import Deployment, Instance, Vm

log = logging.getLogger(__name__)


class InvariantViolation(AssertionError):
    pass


@dataclass
class VmLedger:
    total_shares: float
    total_ram: float
    total_bw: float
    alloc_shares: float = 0.0
    alloc_ram: float = 0.0
    alloc_bw: float = 0.0

    @property
    def idle_shares(self) -> float:
        return self.total_shares - self.alloc_shares

    @property
    def idle_ram(self) -> float:
        return self.total_ram - self.alloc_ram

    @property
    def idle_bw(self) -> float:
        return self.total_bw - self.alloc_bw

    @property
    def utilization(self) -> float:
        return self.alloc_shares / self.total_shares if self.total_shares else 0.0

    def state(self) -> tuple[float, float, float]:
        return (self.alloc_shares, self.alloc_ram, self.alloc_bw)


@dataclass(frozen=True)
class Grant:
    vm: str
    shares: float
    ram: float
    bw: float


class Provisioner:
    """Per-VM resource ledgers and per-instance grants.

    Grants are sized by an instance's requests; limits only set its
    execution speed. Bandwidth is tracked always and gates placement only
    when ``gate_bandwidth`` is set.
    """

    def __init__(self, vms: Iterable[Vm], gate_bandwidth: bool = False):
        self.vm_order: list[str] = []
        self.ledgers: dict[str, VmLedger] = {}
        for vm in vms:
            self.vm_order.append(vm.id)
            self.ledgers[vm.id] = VmLedger(vm.total_shares, vm.ram, vm.bw)
        self.grants: dict[str, Grant] = {}
        self.gate_bandwidth = gate_bandwidth
        self.failed: list[str] = []

    def fits(self, vm_id: str, inst: Instance) -> bool:
        led = self.ledgers[vm_id]
        if led.idle_shares < inst.requested_shares or led.idle_ram < inst.requested_ram:
            return False
        return not self.gate_bandwidth or led.idle_bw >= inst.bandwidth

    def grant(self, inst: Instance, vm_id: str) -> Grant:
        if inst.id in self.grants:
            raise InvariantViolation(f"instance {inst.id} already holds a grant")
        if not self.fits(vm_id, inst):
            raise InvariantViolation(f"grant for {inst.id} exceeds idle resources on {vm_id}")
        g = Grant(vm_id, inst.requested_shares, inst.requested_ram, inst.bandwidth)
        led = self.ledgers[vm_id]
        led.alloc_shares += g.shares
        led.alloc_ram += g.ram
        led.alloc_bw += g.bw
        self.grants[inst.id] = g
        return g

    def release(self, inst_id: str) -> Grant:
        g = self.grants.pop(inst_id)
        led = self.ledgers[g.vm]
        led.alloc_shares -= g.shares
        led.alloc_ram -= g.ram
        led.alloc_bw -= g.bw
        return g

    def snapshot(self) -> dict:
        return {
            "ledgers": {k: v.state() for k, v in self.ledgers.items()},
            "grants": dict(self.grants),
            "failed": list(self.failed),
        }

    def restore(self, snap: dict) -> None:
        """Put ledgers and grants back exactly as captured (float-for-float)."""
        for k, (s, r, b) in snap["ledgers"].items():
            led = self.ledgers[k]
            led.alloc_shares, led.alloc_ram, led.alloc_bw = s, r, b
        self.grants = dict(snap["grants"])

    def check(self, deployment: Deployment | None = None, rel_tol: float = 1e-9) -> None:
        sums: dict[str, list[list[float]]] = {k: [[], [], []] for k in self.ledgers}
        for iid, g in self.grants.items():
            acc = sums[g.vm]
            acc[0].append(g.shares)
            acc[1].append(g.ram)
            acc[2].append(g.bw)
            if deployment is not None:
                inst = deployment.instances.get(iid)
                if inst is None or inst.host_vm != g.vm:
                    raise InvariantViolation(f"grant for {iid} does not match its host")
        for vm_id, led in self.ledgers.items():
            for got, parts, total in zip(led.state(), sums[vm_id],
                                         (led.total_shares, led.total_ram, led.total_bw)):
                want = math.fsum(parts)
                if not math.isclose(got, want, rel_tol=rel_tol, abs_tol=1e-6):
                    raise InvariantViolation(f"ledger drift on {vm_id}: {got} != {want}")
                if want > total * (1 + rel_tol) + 1e-6:
                    raise InvariantViolation(f"{vm_id} over-committed: {want} > {total}")
        if deployment is not None:
            for inst in deployment.instances.values():
                if inst.host_vm is not None and inst.id not in self.grants:
                    raise InvariantViolation(f"hosted instance {inst.id} has no grant")


# -- placement ------------------------------------------------------------------


def _sorted_queue(prov: Provisioner, vm_ids: Sequence[str] | None = None) -> list[str]:
    queue = list(vm_ids if vm_ids is not None else prov.vm_order)
    queue.sort(key=lambda v: -prov.ledgers[v].idle_shares)
    return queue


def place_instance(inst: Instance, deployment: Deployment, prov: Provisioner,
                   queue: list[str] | None = None) -> str | None:
    """First VM (most idle shares first) that fits the instance, or None."""
    if queue is None:
        queue = _sorted_queue(prov)
    for vm_id in queue:
        if prov.fits(vm_id, inst):
            prov.grant(inst, vm_id)
            deployment.bind_host(inst.id, vm_id)
            return vm_id
    return None


def allocate_service(service: str, deployment: Deployment, prov: Provisioner,
                     instances: Sequence[Instance] | None = None) -> bool:
    """First-fit placement of a service's instances, most idle VM first.

    The VM queue is re-sorted after every successful placement. Returns
    True when at least one instance of the service ends up allocated.
    """
    if instances is None:
        instances = [deployment.instances[i] for i in deployment.service_instances[service]]
    queue = _sorted_queue(prov)
    deployed = False
    for inst in instances:
        if inst.host_vm is not None:
            deployed = True
            continue
        placed = False
        for vm_id in queue:
            if prov.fits(vm_id, inst):
                prov.grant(inst, vm_id)
                deployment.bind_host(inst.id, vm_id)
                placed = True
                break
        if placed:
            deployed = True
            queue.sort(key=lambda v: -prov.ledgers[v].idle_shares)
        else:
            prov.failed.append(inst.id)
            log.warning("no VM can host instance %s of service %s", inst.id, service)
    return deployed


def allocate_all(deployment: Deployment, prov: Provisioner) -> dict[str, bool]:
    return {s: allocate_service(s, deployment, prov) for s in deployment.graph.services}


# -- migration --------------------------------------------------------------------


@dataclass(frozen=True)
class Migration:
    t: float
    instance: str | None
    source: str
    target: str | None
    outcome: str  # "Migrated" | "NoTargetVm"


def migration_check(t: float, deployment: Deployment, prov: Provisioner, threshold: float) -> list[Migration]:
    out: list[Migration] = []
    for vm_id in prov.vm_order:
        led = prov.ledgers[vm_id]
        if led.utilization <= threshold:
            continue
        hosted = [deployment.instances[i] for i in sorted(deployment.vms[vm_id].hosted)]
        if not hosted:
            continue
        victim = max(hosted, key=lambda i: prov.grants[i.id].shares)
        targets = [v for v in prov.vm_order if v != vm_id and prov.fits(v, victim)]
        # the move must not push the target over the threshold itself
        targets = [
            v for v in targets
            if (prov.ledgers[v].alloc_shares + victim.requested_shares) / prov.ledgers[v].total_shares <= threshold
        ]
        if not targets:
            out.append(Migration(t, victim.id, vm_id, None, "NoTargetVm"))
            continue
        target = min(targets, key=lambda v: prov.ledgers[v].utilization)
        prov.release(victim.id)
        prov.grant(victim, target)
        deployment.bind_host(victim.id, target)
        out.append(Migration(t, victim.id, vm_id, target, "Migrated"))
    return out


# -- scaling ----------------------------------------------------------------------

OUT, IN, UP, DOWN = "Out", "In", "Up", "Down"
APPLIED, FAILED, SKIPPED = "Applied", "Failed", "Skipped"


@dataclass
class ScalingDecision:
    t: float
    service: str
    direction: str
    trigger: tuple[float, ...]
    outcome: str
    replicas_after: int = 0
    limits_after: float = 0.0
    changed: list[str] = field(default_factory=list)
    failed_list: list[str] = field(default_factory=list)


def scaling_trigger(window: Sequence[float], upper: float, lower: float, k: int,
                    up: str = OUT, down: str = IN) -> str | None:
    """Direction when the last k utilizations are all past one threshold."""
    if len(window) < k:
        return None
    last = window[-k:]
    if all(u > upper for u in last):
        return up
    if all(u < lower for u in last):
        return down
    return None


def _active_replicas(deployment: Deployment, service: str) -> list[Instance]:
    return [
        deployment.instances[i] for i in deployment.service_instances[service]
        if not deployment.instances[i].draining
    ]


def scale_horizontal(t: float, service: str, direction: str, deployment: Deployment,
                     prov: Provisioner, trigger: Sequence[float] = (),
                     load_of: Callable[[str], int] = lambda iid: 0) -> ScalingDecision:
    """Add or retire one replica of the service's replica sets.

    Scale-out mints a replica from each replica set below its maximum and
    tries to place it; the first placement wins. A replica that cannot be
    placed is discarded and the set's counter rolled back. Scale-in marks
    the least-busy replica as draining; the caller removes it when idle.
    """
    dec = ScalingDecision(t, service, direction, tuple(trigger), SKIPPED)
    scaling_list = deployment.replica_set_of(service)
    if direction == OUT:
        attempted = False
        for rs in list(scaling_list):
            active = [i for i in rs.replicas if not deployment.instances[i].draining]
            if len(active) >= rs.max_replicas:
                continue
            attempted = True
            replica = rs.mint()
            vm = None
            queue = _sorted_queue(prov)
            for vm_id in queue:
                if prov.fits(vm_id, replica):
                    vm = vm_id
                    break
            if vm is None:
                # undo the creation so the replica set is untouched
                rs.next_index -= 1
                continue
            deployment.add_instance(replica)
            prov.grant(replica, vm)
            deployment.bind_host(replica.id, vm)
            dec.changed.append(replica.id)
            scaling_list.remove(rs)
            break
        if dec.changed:
            dec.outcome = APPLIED
        elif attempted:
            dec.outcome = FAILED
    elif direction == IN:
        for rs in scaling_list:
            active = [deployment.instances[i] for i in rs.replicas if not deployment.instances[i].draining]
            if len(active) <= rs.min_replicas:
                continue
            victim = min(active, key=lambda i: (load_of(i.id), -rs.replicas.index(i.id)))
            victim.draining = True
            dec.changed.append(victim.id)
            dec.outcome = APPLIED
            break
    else:
        raise ValueError(f"not a horizontal direction: {direction}")
    dec.replicas_after = len(_active_replicas(deployment, service))
    return dec


def retire_instance(inst_id: str, deployment: Deployment, prov: Provisioner) -> None:
    if inst_id in prov.grants:
        prov.release(inst_id)
    deployment.remove_instance(inst_id)


def vertical_target(inst: Instance, original: Instance | None, direction: str, factor: float,
                    ) -> tuple[float, float, float, float]:
    """New (requested, limit) CPU shares after one vertical step; RAM unchanged."""
    req, lim = inst.requested_shares, inst.limit_shares
    if direction == UP:
        req, lim = req * factor, lim * factor
    elif direction == DOWN:
        floor = original.requested_shares if original is not None else 0.0
        req, lim = max(floor, req / factor), max(floor, lim / factor)
    else:
        raise ValueError(f"not a vertical direction: {direction}")
    return (req, lim, inst.requested_ram, inst.limit_ram)


def scale_vertical(t: float, service: str, direction: str, deployment: Deployment,
                   prov: Provisioner, factor: float, trigger: Sequence[float] = ()) -> ScalingDecision:
    """Resize every allocated instance of the service by ``factor``.

    Each instance is released, resized, and re-placed on its own VM if it
    fits there, otherwise on the most idle VM that fits. If nothing fits,
    its prior resources and grant are restored exactly and it goes on the
    failed list.
    """
    dec = ScalingDecision(t, service, direction, tuple(trigger), SKIPPED)
    for inst in deployment.allocated_instances(service):
        if inst.draining:
            continue
        rs = deployment.replica_sets.get(inst.replica_set) if inst.replica_set else None
        original = Instance.from_spec(inst.id, rs.template) if rs is not None else None
        new = vertical_target(inst, original, direction, factor)
        if new == inst.resources():
            continue
        before = inst.resources()
        snap = prov.snapshot()
        host = inst.host_vm
        prov.release(inst.id)
        inst.set_resources(new)
        target = host if prov.fits(host, inst) else None
        if target is None:
            for vm_id in _sorted_queue(prov):
                if prov.fits(vm_id, inst):
                    target = vm_id
                    break
        if target is None:
            inst.set_resources(before)
            prov.restore(snap)
            dec.failed_list.append(inst.id)
            continue
        prov.grant(inst, target)
        if target != host:
            deployment.bind_host(inst.id, target)
        dec.changed.append(inst.id)
    if dec.changed:
        dec.outcome = APPLIED
    elif dec.failed_list:
        dec.outcome = FAILED
    prov.failed.extend(dec.failed_list)
    live = deployment.allocated_instances(service)
    dec.replicas_after = len(live)
    dec.limits_after = max((i.limit_shares for i in live), default=0.0)
    return dec


@dataclass(frozen=True)
class ScalingPolicy:
    """Trigger directions plus the function applying one decision."""

    name: str
    up: str
    down: str
    apply: Callable[..., ScalingDecision] | None


def _apply_horizontal(t, service, direction, deployment, prov, cfg, trigger, load_of):
    return scale_horizontal(t, service, direction, deployment, prov, trigger, load_of)


def _apply_vertical(t, service, direction, deployment, prov, cfg, trigger, load_of):
    return scale_vertical(t, service, direction, deployment, prov, cfg.vs_factor, trigger)


SCALING_POLICIES: dict[str, ScalingPolicy] = {
    "none": ScalingPolicy("none", OUT, IN, None),
    "horizontal": ScalingPolicy("horizontal", OUT, IN, _apply_horizontal),
    "vertical": ScalingPolicy("vertical", UP, DOWN, _apply_vertical),
}


def register_scaling_policy(policy: ScalingPolicy) -> None:
    SCALING_POLICIES[policy.name] = policy


__all__ = [
    "Provisioner", "VmLedger", "Grant", "InvariantViolation", "allocate_service", "allocate_all",
    "place_instance", "Migration", "migration_check", "ScalingDecision", "scaling_trigger",
    "scale_horizontal", "scale_vertical", "vertical_target", "retire_instance",
    "ScalingPolicy", "SCALING_POLICIES", "register_scaling_policy",
    "OUT", "IN", "UP", "DOWN", "APPLIED", "FAILED", "SKIPPED",
]
