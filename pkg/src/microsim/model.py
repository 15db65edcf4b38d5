"""Application entities and the mappings between them.

The service graph keeps forward (caller -> callees) and reverse
(callee -> callers) adjacency side by side, and enumerates every
root-to-leaf chain for each API up front.
"""

from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

log = logging.getLogger(__name__)

DEFAULT_MAX_PATHS = 10_000


class ModelError(Exception):
    pass


class UnknownService(ModelError):
    def __init__(self, name: str, where: str = ""):
        self.name = name
        msg = f"unknown service {name!r}"
        if where:
            msg += f" (referenced by {where})"
        super().__init__(msg)


class CycleDetected(ModelError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("service graph has a cycle: " + " -> ".join(cycle))


class PathLimitExceeded(ModelError):
    pass


@dataclass(frozen=True)
class Api:
    name: str
    entry_service: str
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"api {self.name!r}: weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class Service:
    name: str
    labels: frozenset[str] = frozenset()
    calls: tuple[str, ...] = ()

    def __post_init__(self):
        # a service with no labels is matched by its own name
        if not self.labels:
            object.__setattr__(self, "labels", frozenset([self.name]))
        object.__setattr__(self, "labels", frozenset(self.labels))
        object.__setattr__(self, "calls", tuple(self.calls))


@dataclass
class ServiceGraph:
    services: dict[str, Service]
    apis: dict[str, Api]
    forward: dict[str, list[str]]
    reverse: dict[str, list[str]]
    chains: dict[str, list[tuple[str, ...]]]
    topo_order: list[str]
    # number of root-to-leaf paths below each service, used to index chains
    leaf_paths: dict[str, int]

    def is_leaf(self, service: str) -> bool:
        return not self.forward[service]

    def edges(self) -> set[tuple[str, str]]:
        return {(s, t) for s, callees in self.forward.items() for t in callees}

    def cloudlets_per_request(self, api: str) -> int:
        """Cloudlets one request creates: one per node counted with path multiplicity."""
        memo: dict[str, int] = {}
        for s in reversed(self.topo_order):
            memo[s] = 1 + sum(memo[c] for c in self.forward[s])
        return memo[self.apis[api].entry_service]


def _find_cycle(forward: dict[str, list[str]]) -> list[str] | None:
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(forward, WHITE)
    for root in forward:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(forward[root]))]
        path = [root]
        color[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = BLACK
            elif color[nxt] == GREY:
                return path[path.index(nxt):] + [nxt]
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append((nxt, iter(forward[nxt])))
    return None


def build_graph(
    services: Iterable[Service],
    apis: Iterable[Api],
    max_paths: int = DEFAULT_MAX_PATHS,
) -> ServiceGraph:
    by_name: dict[str, Service] = {}
    for svc in services:
        if svc.name in by_name:
            raise ModelError(f"duplicate service {svc.name!r}")
        by_name[svc.name] = svc

    forward: dict[str, list[str]] = {}
    reverse: dict[str, list[str]] = {name: [] for name in by_name}
    for name, svc in by_name.items():
        forward[name] = []
        for callee in svc.calls:
            if callee not in by_name:
                raise UnknownService(callee, where=name)
            if callee in forward[name]:
                continue
            forward[name].append(callee)
            reverse[callee].append(name)

    cycle = _find_cycle(forward)
    if cycle:
        raise CycleDetected(cycle)

    # Kahn's algorithm, ties broken by declaration order
    indeg = {n: len(reverse[n]) for n in by_name}
    ready = deque(n for n in by_name if indeg[n] == 0)
    topo: list[str] = []
    while ready:
        n = ready.popleft()
        topo.append(n)
        for c in forward[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)

    leaf_paths: dict[str, int] = {}
    for n in reversed(topo):
        leaf_paths[n] = sum(leaf_paths[c] for c in forward[n]) or 1

    api_map: dict[str, Api] = {}
    chains: dict[str, list[tuple[str, ...]]] = {}
    for api in apis:
        if api.name in api_map:
            raise ModelError(f"duplicate api {api.name!r}")
        if api.entry_service not in by_name:
            raise UnknownService(api.entry_service, where=f"api {api.name!r}")
        if leaf_paths[api.entry_service] > max_paths:
            raise PathLimitExceeded(
                f"api {api.name!r} has {leaf_paths[api.entry_service]} chains "
                f"(limit {max_paths})"
            )
        api_map[api.name] = api
        chains[api.name] = _enumerate_chains(api.entry_service, forward)

    return ServiceGraph(
        services=by_name,
        apis=api_map,
        forward=forward,
        reverse=reverse,
        chains=chains,
        topo_order=topo,
        leaf_paths=leaf_paths,
    )


def _enumerate_chains(entry: str, forward: dict[str, list[str]]) -> list[tuple[str, ...]]:
    out: list[tuple[str, ...]] = []
    stack: list[tuple[str, tuple[str, ...]]] = [(entry, (entry,))]
    while stack:
        node, path = stack.pop()
        callees = forward[node]
        if not callees:
            out.append(path)
            continue
        # push in reverse so chains come out in callee declaration order
        for c in reversed(callees):
            stack.append((c, path + (c,)))
    return out


class InstanceKind(str, Enum):
    POD = "Pod"
    CONTAINER = "Container"
    USER_DEFINED = "UserDefined"


@dataclass(frozen=True)
class InstanceSpec:
    """Resource template shared by every replica of a replica set."""

    kind: InstanceKind = InstanceKind.POD
    labels: frozenset[str] = frozenset()
    requested_shares: float = 500.0
    limit_shares: float = 1000.0
    requested_ram: float = 256.0
    limit_ram: float = 512.0
    bandwidth: float = 100.0
    size: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(self.labels))
        if self.requested_shares > self.limit_shares:
            raise ValueError(
                f"requested shares {self.requested_shares} exceed limit {self.limit_shares}"
            )
        if self.requested_ram > self.limit_ram:
            raise ValueError(f"requested ram {self.requested_ram} exceeds limit {self.limit_ram}")


@dataclass(slots=True)
class Instance:
    id: str
    kind: InstanceKind
    labels: frozenset[str]
    requested_shares: float
    limit_shares: float
    requested_ram: float
    limit_ram: float
    bandwidth: float
    size: float
    host_vm: str | None = None
    replica_set: str | None = None
    draining: bool = False

    @classmethod
    def from_spec(cls, id: str, spec: InstanceSpec, replica_set: str | None = None) -> Instance:
        return cls(
            id=id,
            kind=spec.kind,
            labels=spec.labels,
            requested_shares=spec.requested_shares,
            limit_shares=spec.limit_shares,
            requested_ram=spec.requested_ram,
            limit_ram=spec.limit_ram,
            bandwidth=spec.bandwidth,
            size=spec.size,
            replica_set=replica_set,
        )

    @property
    def allocated(self) -> bool:
        return self.host_vm is not None

    def resources(self) -> tuple[float, float, float, float]:
        return (self.requested_shares, self.limit_shares, self.requested_ram, self.limit_ram)

    def set_resources(self, values: tuple[float, float, float, float]) -> None:
        (self.requested_shares, self.limit_shares,
         self.requested_ram, self.limit_ram) = values


@dataclass
class ReplicaSet:
    name: str
    template: InstanceSpec
    replicas: list[str] = field(default_factory=list)
    min_replicas: int = 1
    max_replicas: int = 1
    next_index: int = 0

    def mint(self) -> Instance:
        inst = Instance.from_spec(f"{self.name}-{self.next_index}", self.template, self.name)
        self.next_index += 1
        return inst


@dataclass
class Vm:
    id: str
    mips_per_pe: float
    num_pes: int
    ram: float
    bw: float
    total_shares: float = 0.0
    hosted: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not self.total_shares:
            self.total_shares = self.num_pes * 1000.0

    def shares_to_mips(self, shares: float) -> float:
        # one full core of shares runs at one PE's speed
        return shares / 1000.0 * self.mips_per_pe


class Deployment:
    """Mutable state of a deployed application: entities plus all mappings.

    ``service_instances`` / ``instance_services`` come from label matching;
    ``Instance.host_vm`` / ``Vm.hosted`` come from allocation. Both pairs
    are kept mutually consistent by the methods here.
    """

    def __init__(
        self,
        graph: ServiceGraph,
        replica_sets: Iterable[ReplicaSet] = (),
        vms: Iterable[Vm] = (),
        instances: Iterable[Instance] = (),
    ):
        self.graph = graph
        self.replica_sets: dict[str, ReplicaSet] = {}
        self.instances: dict[str, Instance] = {}
        self.vms: dict[str, Vm] = {vm.id: vm for vm in vms}
        self.service_instances: dict[str, list[str]] = {s: [] for s in graph.services}
        self.instance_services: dict[str, list[str]] = {}
        for rs in replica_sets:
            self.replica_sets[rs.name] = rs
        for inst in instances:
            self.instances[inst.id] = inst

    @classmethod
    def from_replica_sets(
        cls, graph: ServiceGraph, replica_sets: Iterable[ReplicaSet], vms: Iterable[Vm]
    ) -> Deployment:
        dep = cls(graph, vms=vms)
        for rs in replica_sets:
            dep.replica_sets[rs.name] = rs
            for rid in rs.replicas:
                dep.instances[rid] = Instance.from_spec(rid, rs.template, rs.name)
        # label -> instances index, so matching costs O(matches) not O(S*I)
        by_label: dict[str, list[Instance]] = {}
        for inst in dep.instances.values():
            for lab in sorted(inst.labels):
                by_label.setdefault(lab, []).append(inst)
        order = {iid: k for k, iid in enumerate(dep.instances)}
        for svc in graph.services.values():
            seen: dict[str, Instance] = {}
            for lab in svc.labels:
                for inst in by_label.get(lab, ()):
                    seen[inst.id] = inst
            pool = sorted(seen.values(), key=lambda i: order[i.id])
            match_instances(svc, pool, dep)
        return dep

    def add_instance(self, inst: Instance) -> list[str]:
        """Register a new instance and label-match it against every service."""
        self.instances[inst.id] = inst
        if inst.replica_set and inst.id not in self.replica_sets[inst.replica_set].replicas:
            self.replica_sets[inst.replica_set].replicas.append(inst.id)
        matched = []
        for svc in self.graph.services.values():
            if svc.labels & inst.labels:
                self._link(svc.name, inst.id)
                matched.append(svc.name)
        self.instance_services.setdefault(inst.id, [])
        return matched

    def remove_instance(self, inst_id: str) -> None:
        inst = self.instances.pop(inst_id)
        if inst.host_vm is not None:
            self.vms[inst.host_vm].hosted.discard(inst_id)
            inst.host_vm = None
        for svc in self.instance_services.pop(inst_id, []):
            self.service_instances[svc].remove(inst_id)
        if inst.replica_set:
            self.replica_sets[inst.replica_set].replicas.remove(inst_id)

    def _link(self, service: str, inst_id: str) -> None:
        if inst_id not in self.service_instances[service]:
            self.service_instances[service].append(inst_id)
        lst = self.instance_services.setdefault(inst_id, [])
        if service not in lst:
            lst.append(service)

    def bind_host(self, inst_id: str, vm_id: str | None) -> None:
        inst = self.instances[inst_id]
        if inst.host_vm is not None:
            self.vms[inst.host_vm].hosted.discard(inst_id)
        inst.host_vm = vm_id
        if vm_id is not None:
            self.vms[vm_id].hosted.add(inst_id)

    def allocated_instances(self, service: str) -> list[Instance]:
        return [
            self.instances[i]
            for i in self.service_instances[service]
            if self.instances[i].host_vm is not None
        ]

    def replica_set_of(self, service: str) -> list[ReplicaSet]:
        names = []
        for iid in self.service_instances[service]:
            rs = self.instances[iid].replica_set
            if rs and rs not in names:
                names.append(rs)
        if not names:
            # a scaled-to-zero service still owns replica sets by label
            labels = self.graph.services[service].labels
            names = [n for n, rs in self.replica_sets.items() if rs.template.labels & labels]
        return [self.replica_sets[n] for n in names]

    def check_consistency(self) -> None:
        for svc, insts in self.service_instances.items():
            for i in insts:
                assert svc in self.instance_services[i], (svc, i)
        for i, svcs in self.instance_services.items():
            for s in svcs:
                assert i in self.service_instances[s], (s, i)
        for vm in self.vms.values():
            for i in vm.hosted:
                assert self.instances[i].host_vm == vm.id, (vm.id, i)
        for inst in self.instances.values():
            if inst.host_vm is not None:
                assert inst.id in self.vms[inst.host_vm].hosted, inst.id

    def snapshot(self) -> dict:
        """Deep copy of all mapping and entity state, for rollback checks."""
        return {
            "instances": {k: copy.copy(v) for k, v in self.instances.items()},
            "vms": {k: (v.id, frozenset(v.hosted)) for k, v in self.vms.items()},
            "service_instances": {k: list(v) for k, v in self.service_instances.items()},
            "instance_services": {k: list(v) for k, v in self.instance_services.items()},
            "replica_sets": {
                k: (list(v.replicas), v.next_index) for k, v in self.replica_sets.items()
            },
        }


def match_instances(
    service: Service, pool: Iterable[Instance], deployment: Deployment | None = None
) -> list[Instance]:
    """Instances whose labels intersect the service's labels.

    When a deployment is given the mapping is registered in both directions.
    """
    matched = [inst for inst in pool if inst.labels & service.labels]
    if deployment is not None:
        for inst in matched:
            deployment._link(service.name, inst.id)
        if not matched:
            log.warning("service %s matched no instances", service.name)
    return matched


__all__ = [
    "Api", "Service", "ServiceGraph", "Instance", "InstanceKind", "InstanceSpec",
    "ReplicaSet", "Vm", "Deployment", "build_graph", "match_instances",
    "ModelError", "UnknownService", "CycleDetected", "PathLimitExceeded",
    "DEFAULT_MAX_PATHS",
]
