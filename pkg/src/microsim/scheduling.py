"""Cloudlet scheduling: per-service queues, load balancing, time-shared execution.

Each service owns a :class:`CloudletScheduler` with a waiting queue, an
executing set (held by the instances' executors) and a finished list.
Each allocated instance owns an :class:`InstanceExecutor` that time-shares
its MIPS among the cloudlets it runs.

The executor is event driven rather than tick driven. It keeps a virtual
clock ``vtime`` that advances at ``mips / total_weight`` per simulated
second; a cloudlet of weight ``w`` admitted at virtual time ``v`` with
``r`` MI left finishes when ``vtime`` reaches ``v + r / w``. Changing the
executing set only changes the slope of ``vtime``, so admissions and
completions cost O(log n) instead of rescanning every member.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Iterable

import numpy as np


class CloudletStatus(IntEnum):
    WAITING = 0
    EXECUTING = 1
    FINISHED = 2


@dataclass(slots=True, eq=False)
class RpcCloudlet:
    id: int
    request: Any = field(repr=False)
    service: str = ""
    length: float = 0.0
    created_at: float = 0.0
    parent: RpcCloudlet | None = field(default=None, repr=False)
    # index of the first API chain passing through this cloudlet's path
    chain_index: int = 0
    remaining: float = -1.0
    status: CloudletStatus = CloudletStatus.WAITING
    instance: str | None = None
    started_at: float = float("nan")
    finished_at: float = float("nan")
    children: list[int] = field(default_factory=list)
    weight: float = 1.0
    priority: int = 0
    starved: bool = False
    vtag: float = 0.0
    # summed delay along the call path ending at this cloudlet
    cum_delay: float = 0.0

    def __post_init__(self):
        if self.remaining < 0:
            self.remaining = self.length

    @property
    def request_id(self) -> int:
        return self.request.id if self.request is not None else -1

    @property
    def parent_id(self) -> int | None:
        return self.parent.id if self.parent is not None else None

    @property
    def wait_time(self) -> float:
        return self.started_at - self.created_at

    @property
    def exec_time(self) -> float:
        return self.finished_at - self.started_at

    def delay(self, include_wait: bool = True) -> float:
        if include_wait:
            return self.finished_at - self.created_at
        return self.finished_at - self.started_at


class LengthSampler:
    """Gaussian cloudlet lengths, clamped below at 1 MI.

    Standard normals are drawn from the kernel generator in blocks; the
    consumption order is fixed by event order, so runs stay reproducible.
    """

    BLOCK = 4096

    def __init__(
        self,
        rng: np.random.Generator,
        mean: float,
        std: float,
        overrides: dict[str, tuple[float, float]] | None = None,
    ):
        self.rng = rng
        self.default = (float(mean), float(std))
        self.overrides = dict(overrides or {})
        self._buf: list[float] = []

    def params(self, service: str) -> tuple[float, float]:
        return self.overrides.get(service, self.default)

    def _z(self) -> float:
        if not self._buf:
            self._buf = self.rng.standard_normal(self.BLOCK).tolist()
            self._buf.reverse()
        return self._buf.pop()

    def sample(self, service: str) -> float:
        mean, std = self.overrides.get(service, self.default)
        if std == 0.0:
            return mean
        x = mean + std * self._z()
        return x if x > 1.0 else 1.0


def sample_length(service: str, sampler: LengthSampler) -> float:
    return sampler.sample(service)


class InstanceExecutor:
    """Time-shared processor for one instance."""

    __slots__ = (
        "instance_id", "mips", "heap", "n", "wsum", "vtime", "last",
        "version", "draining", "meter", "services", "order", "indexed_in",
    )

    def __init__(self, instance_id: str, mips: float, meter: Any = None):
        self.instance_id = instance_id
        self.mips = float(mips)
        self.heap: list[tuple[float, int, RpcCloudlet]] = []
        self.n = 0
        self.wsum = 0.0
        self.vtime = 0.0
        self.last = 0.0
        self.version = 0
        self.draining = False
        self.meter = meter
        self.services: list[str] = []
        # attach sequence number; ties between instances go to the older one
        self.order = 0
        # schedulers keeping this executor in a max-idle index
        self.indexed_in: list[CloudletScheduler] = []

    def _advance(self, t: float) -> None:
        if self.meter is not None:
            self.meter.accrue(t, self.n)
        if self.wsum > 0.0:
            self.vtime += (t - self.last) * self.mips / self.wsum
        self.last = t

    def add(self, c: RpcCloudlet, t: float) -> None:
        self._advance(t)
        c.vtag = self.vtime + c.remaining / c.weight
        heapq.heappush(self.heap, (c.vtag, c.id, c))
        self.n += 1
        self.wsum += c.weight

    def idle_score(self) -> float:
        """MIPS a newly added unit-weight cloudlet would receive."""
        return self.mips / (self.wsum + 1.0)

    def rate(self, c: RpcCloudlet) -> float:
        """Current MIPS received by an executing cloudlet."""
        return self.mips * c.weight / self.wsum

    def next_finish_time(self) -> float:
        tag = self.heap[0][0]
        return self.last + (tag - self.vtime) * self.wsum / self.mips

    def remaining_at(self, c: RpcCloudlet, t: float) -> float:
        v = self.vtime
        if self.wsum > 0.0:
            v += (t - self.last) * self.mips / self.wsum
        return max(0.0, (c.vtag - v) * c.weight)

    def pop_finished(self, t: float, force: bool = False) -> list[RpcCloudlet]:
        self._advance(t)
        heap = self.heap
        out = []
        limit = self.vtime + 1e-9 * max(1.0, abs(self.vtime))
        while heap and (heap[0][0] <= limit or (force and not out)):
            _, _, c = heapq.heappop(heap)
            c.remaining = 0.0
            out.append(c)
            self.n -= 1
            self.wsum -= c.weight
        if self.n == 0:
            # rebase the virtual clock each busy period to bound float drift
            self.vtime = 0.0
            self.wsum = 0.0
        return out

    def set_mips(self, mips: float, t: float) -> None:
        self._advance(t)
        self.mips = float(mips)

    def executing(self) -> list[RpcCloudlet]:
        return [entry[2] for entry in self.heap]


# -- load balancing -----------------------------------------------------------

LoadBalancer = Callable[[list[InstanceExecutor], RpcCloudlet, np.random.Generator], InstanceExecutor]


def max_idle(candidates: list[InstanceExecutor], cloudlet: RpcCloudlet, rng) -> InstanceExecutor:
    # the instance where a newcomer would get the most MIPS; with equal
    # instances that is the one running the fewest cloudlets
    best = candidates[0]
    best_score = best.mips / (best.wsum + cloudlet.weight)
    for ex in candidates[1:]:
        score = ex.mips / (ex.wsum + cloudlet.weight)
        if score > best_score:
            best, best_score = ex, score
    return best


def random_choice(candidates: list[InstanceExecutor], cloudlet: RpcCloudlet, rng) -> InstanceExecutor:
    return candidates[int(rng.integers(len(candidates)))]


LOAD_BALANCERS: dict[str, LoadBalancer] = {"MaxIdle": max_idle, "Random": random_choice}


def register_load_balancer(name: str, fn: LoadBalancer) -> None:
    LOAD_BALANCERS[name] = fn


# queue-order hooks: a sort key over cloudlets, smaller runs first
QUEUE_ORDERS: dict[str, Callable[[RpcCloudlet], Any] | None] = {
    "fifo": None,
    "priority": lambda c: -c.priority,
}


def register_queue_order(name: str, key: Callable[[RpcCloudlet], Any]) -> None:
    QUEUE_ORDERS[name] = key


class CloudletScheduler:
    """Waiting / executing / finished bookkeeping for one service.

    With many instances, MaxIdle selection goes through a lazy heap of
    idle scores instead of a linear scan. Entries may be stale only in
    the direction of overstating an instance's score (adding work lowers
    it), so the top entry is either current or refreshed and pushed back;
    executors whose score rises call :meth:`notify`. The result, including
    tie-breaks by attach order, matches the scan exactly.
    """

    INDEX_THRESHOLD = 8

    def __init__(
        self,
        service: str,
        lb_policy: str = "MaxIdle",
        queue_order: str = "fifo",
        max_concurrency: int | None = None,
        retain_finished: bool = True,
    ):
        if lb_policy not in LOAD_BALANCERS:
            raise KeyError(f"unknown load balancer {lb_policy!r}")
        if queue_order not in QUEUE_ORDERS:
            raise KeyError(f"unknown queue order {queue_order!r}")
        self.service = service
        self.lb_policy = lb_policy
        self._lb = LOAD_BALANCERS[lb_policy]
        self._order_key = QUEUE_ORDERS[queue_order]
        self.max_concurrency = max_concurrency
        self.retain_finished = retain_finished
        self.waiting: deque[RpcCloudlet] = deque()
        self._pq: list[tuple[Any, int, RpcCloudlet]] = []
        self._pq_seq = itertools.count()
        self.executors: list[InstanceExecutor] = []
        self.finished: list[RpcCloudlet] = []
        self.n_waiting = 0
        self._idx: list[tuple[float, int, InstanceExecutor]] | None = None
        self.admitted = 0
        self.n_executing = 0
        self.n_finished = 0
        self.n_starved = 0

    def __len__(self) -> int:
        return self.n_waiting

    # -- executor membership and the max-idle index --

    def add_executor(self, ex: InstanceExecutor) -> None:
        self.executors.append(ex)
        if self._idx is not None:
            ex.indexed_in.append(self)
            self.notify(ex)
        elif self._lb is max_idle and len(self.executors) > self.INDEX_THRESHOLD:
            self._idx = []
            for e in self.executors:
                e.indexed_in.append(self)
            self._rebuild_index()

    def remove_executor(self, ex: InstanceExecutor) -> None:
        self.executors.remove(ex)
        if self._idx is not None:
            ex.indexed_in.remove(self)
            self._rebuild_index()

    def _rebuild_index(self) -> None:
        self._idx = [(-e.idle_score(), e.order, e) for e in self.executors]
        heapq.heapify(self._idx)

    def notify(self, ex: InstanceExecutor) -> None:
        """Record that ``ex``'s idle score may have gone up."""
        idx = self._idx
        heapq.heappush(idx, (-ex.idle_score(), ex.order, ex))
        if len(idx) > 4 * len(self.executors) + 64:
            self._rebuild_index()

    def _pick_indexed(self) -> InstanceExecutor | None:
        idx = self._idx
        cap = self.max_concurrency
        while idx:
            key, order, ex = idx[0]
            if ex.draining or (cap is not None and ex.n >= cap):
                # re-entered through notify() once it frees a slot
                heapq.heappop(idx)
                continue
            cur = -ex.idle_score()
            if cur != key:
                heapq.heapreplace(idx, (cur, order, ex))
                continue
            return ex
        return None

    def waiting_cloudlets(self) -> list[RpcCloudlet]:
        if self._order_key is None:
            return list(self.waiting)
        return [e[2] for e in sorted(self._pq)]

    def admit(self, c: RpcCloudlet) -> None:
        c.status = CloudletStatus.WAITING
        self.admitted += 1
        self.n_waiting += 1
        if self._order_key is None:
            self.waiting.append(c)
        else:
            heapq.heappush(self._pq, (self._order_key(c), next(self._pq_seq), c))

    def _pop_waiting(self) -> RpcCloudlet:
        self.n_waiting -= 1
        if self._order_key is None:
            return self.waiting.popleft()
        return heapq.heappop(self._pq)[2]

    def _push_front(self, c: RpcCloudlet) -> None:
        self.n_waiting += 1
        if self._order_key is None:
            self.waiting.appendleft(c)
        else:
            heapq.heappush(self._pq, (self._order_key(c), -1, c))

    def candidates(self) -> list[InstanceExecutor]:
        cap = self.max_concurrency
        return [
            ex for ex in self.executors
            if not ex.draining and (cap is None or ex.n < cap)
        ]

    def try_start(self, t: float, rng: np.random.Generator) -> list[tuple[RpcCloudlet, InstanceExecutor]]:
        """Move waiting cloudlets onto instances chosen by the load balancer.

        Cloudlets that find no instance with spare concurrency stay queued;
        their wait time keeps growing until a later attempt succeeds.
        """
        started = []
        if not self.n_waiting:
            return started
        cap = self.max_concurrency
        indexed = self._idx is not None
        cands = None if indexed else self.candidates()
        lb = self._lb
        while self.n_waiting:
            c = self._pop_waiting()
            if indexed:
                if c.weight == 1.0:
                    ex = self._pick_indexed()
                else:
                    cands = self.candidates()
                    ex = lb(cands, c, rng) if cands else None
            else:
                ex = lb(cands, c, rng) if cands else None
            if ex is None:
                self._push_front(c)
                break
            ex.add(c, t)
            c.status = CloudletStatus.EXECUTING
            c.instance = ex.instance_id
            c.started_at = t
            self.n_executing += 1
            started.append((c, ex))
            if cap is not None and ex.n >= cap and not indexed:
                cands = [e for e in cands if e is not ex]
        return started

    def record_finished(self, c: RpcCloudlet, t: float) -> None:
        c.status = CloudletStatus.FINISHED
        c.finished_at = t
        self.n_executing -= 1
        self.n_finished += 1
        if self.retain_finished:
            self.finished.append(c)

    def check_starvation(self, t: float, timeout: float) -> int:
        """Flag cloudlets waiting longer than ``timeout`` and requeue them at the tail."""
        flagged = 0
        if self._order_key is None:
            keep: deque[RpcCloudlet] = deque()
            starved: list[RpcCloudlet] = []
            for c in self.waiting:
                if t - c.created_at >= timeout and not c.starved:
                    c.starved = True
                    starved.append(c)
                else:
                    keep.append(c)
            keep.extend(starved)
            self.waiting = keep
            flagged = len(starved)
        else:
            for _, _, c in self._pq:
                if t - c.created_at >= timeout and not c.starved:
                    c.starved = True
                    flagged += 1
        self.n_starved += flagged
        return flagged

    def conservation_ok(self) -> bool:
        if self.n_waiting != len(self.waiting) + len(self._pq):
            return False
        return self.n_waiting + self.n_executing + self.n_finished == self.admitted


def derive_children(
    parent: RpcCloudlet,
    callees: Iterable[tuple[str, int]],
    t: float,
    sampler: LengthSampler,
    next_id: Callable[[], int],
) -> list[RpcCloudlet]:
    """One child cloudlet per callee of the finished cloudlet's service."""
    kids = []
    for svc, offset in callees:
        child = RpcCloudlet(
            next_id(), parent.request, svc, sampler.sample(svc), t,
            parent=parent, chain_index=parent.chain_index + offset,
        )
        parent.children.append(child.id)
        kids.append(child)
    return kids


class NoAllocatedInstance(RuntimeError):
    """The entry service of a request has no allocated instance."""


class SchedulingSystem:
    """All service schedulers and instance executors of one simulation.

    Owns cloudlet ids and length sampling, so that root creation,
    derivation and admission follow one code path.
    """

    def __init__(self, graph, sampler: LengthSampler, cfg, include_wait: bool = True,
                 on_admit: Callable[[CloudletScheduler], None] | None = None):
        self.graph = graph
        self.sampler = sampler
        self.include_wait = include_wait
        self.retain = cfg.retain_finished
        self.schedulers = {
            s: CloudletScheduler(s, cfg.lb_policy, cfg.queue_order, cfg.max_concurrency, cfg.retain_finished)
            for s in graph.services
        }
        # callee list with chain-index offsets: the chains through an earlier
        # callee come first in enumeration order
        self.callees: dict[str, list[tuple[str, int]]] = {}
        for s, outs in graph.forward.items():
            off, lst = 0, []
            for callee in outs:
                lst.append((callee, off))
                off += graph.leaf_paths[callee]
            self.callees[s] = lst
        self.executors: dict[str, InstanceExecutor] = {}
        self._attach_seq = itertools.count()
        self._ids = itertools.count()
        self.next_id = self._ids.__next__
        self.created = 0
        self.on_admit = on_admit
        self.on_request_done: Callable[[Any, float], None] | None = None

    def attach(self, ex: InstanceExecutor, services: Iterable[str]) -> None:
        self.executors[ex.instance_id] = ex
        ex.order = next(self._attach_seq)
        ex.services = list(services)
        for s in ex.services:
            self.schedulers[s].add_executor(ex)

    def detach(self, instance_id: str) -> InstanceExecutor:
        ex = self.executors.pop(instance_id)
        for s in ex.services:
            self.schedulers[s].remove_executor(ex)
        return ex

    def admit(self, c: RpcCloudlet) -> None:
        sched = self.schedulers[c.service]
        sched.admit(c)
        self.created += 1
        req = c.request
        if self.retain and req is not None and req.cloudlets is not None:
            req.cloudlets.append(c)
        if self.on_admit is not None:
            self.on_admit(sched)

    def root(self, request, service: str, t: float) -> RpcCloudlet:
        if not self.schedulers[service].executors:
            raise NoAllocatedInstance(service)
        c = RpcCloudlet(self.next_id(), request, service, self.sampler.sample(service), t)
        request.pending = 1
        if self.retain:
            request.cloudlets = []
        self.admit(c)
        return c

    def complete(self, c: RpcCloudlet, t: float) -> list[RpcCloudlet]:
        """Finish a cloudlet and derive one child per callee of its service."""
        self.schedulers[c.service].record_finished(c, t)
        d = (t - c.created_at) if self.include_wait else (t - c.started_at)
        c.cum_delay = d + (c.parent.cum_delay if c.parent is not None else 0.0)
        req = c.request
        kids = derive_children(c, self.callees[c.service], t, self.sampler, self.next_id)
        if not kids and (c.cum_delay > req.best_delay
                         or (c.cum_delay == req.best_delay and c.chain_index < req.best_index)):
            req.best_delay, req.best_index = c.cum_delay, c.chain_index
        req.pending += len(kids) - 1
        for k in kids:
            self.admit(k)
        if req.pending == 0 and self.on_request_done is not None:
            self.on_request_done(req, t)
        return kids


def run_single_instance(jobs: Iterable[tuple[float, float]], mips: float,
                        weights: Iterable[float] | None = None) -> list[float]:
    """Finish times of ``(arrival_s, length_mi)`` jobs time-sharing one instance.

    Drives one scheduler and one executor through the event kernel, the
    same way a full simulation does. Returned in input order.
    """
    from .engine import EventKind, Simulator

    jobs = list(jobs)
    ws = list(weights) if weights is not None else [1.0] * len(jobs)
    sim = Simulator()
    sched = CloudletScheduler("svc")
    ex = InstanceExecutor("inst-0", mips)
    sched.add_executor(ex)
    finish = [float("nan")] * len(jobs)

    def resched(t: float) -> None:
        ex.version += 1
        if ex.n:
            sim.at(max(t, ex.next_finish_time()), EventKind.CLOUDLET_COMPLETE, ex.version)

    def on_arrival(ev) -> None:
        c = ev.payload
        sched.admit(c)
        sched.try_start(ev.fire_at, sim.rng)
        resched(ev.fire_at)

    def on_complete(ev) -> None:
        if ev.payload != ex.version:
            return
        t = ev.fire_at
        for c in ex.pop_finished(t, force=True):
            sched.record_finished(c, t)
            finish[c.id] = t
        resched(t)

    sim.register(EventKind.DISPATCH, on_arrival)
    sim.register(EventKind.CLOUDLET_COMPLETE, on_complete)
    for i, ((arrival, length), w) in enumerate(zip(jobs, ws)):
        sim.at(arrival, EventKind.DISPATCH, RpcCloudlet(i, None, "svc", length, arrival, weight=w))
    sim.run()
    return finish


__all__ = [
    "SchedulingSystem", "NoAllocatedInstance", "CloudletStatus", "RpcCloudlet", "LengthSampler",
    "sample_length", "InstanceExecutor", "run_single_instance", "CloudletScheduler", "LOAD_BALANCERS", "QUEUE_ORDERS", "register_load_balancer",
    "register_queue_order", "max_idle", "random_choice", "derive_children",
]
