"""Open-loop request generation, closed-form load predictions, and dispatch."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Api
from .scheduling import NoAllocatedInstance

IN_FLIGHT = "InFlight"
COMPLETED = "Completed"
FAILED = "Failed"


@dataclass(slots=True, eq=False)
class Request:
    id: int
    api: str
    arrival: float
    status: str = IN_FLIGHT
    response_time: float | None = None  # ms
    critical_path: tuple[str, ...] | None = None
    cp_estimate: float | None = None  # ms, path-sum value
    # bookkeeping while in flight
    pending: int = 0
    best_delay: float = -math.inf
    best_index: int = -1
    cloudlets: list | None = field(default=None, repr=False)

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED


class ClientPool:
    """Per-client countdown timers.

    A timer is the time left until the client's next request is due,
    measured from the current tick. A client fires on the first tick at
    which its timer has run down to zero; the wait drawn afterwards is
    added to the (possibly slightly negative) remainder, so the long-run
    period between requests is exactly the mean wait.
    """

    def __init__(self, capacity: int):
        self.waiting = np.zeros(capacity)
        self.current_clients = 0
        self.current_num = 0

    @property
    def capacity(self) -> int:
        return len(self.waiting)


def equilibrium_residual(u: np.ndarray, p0: float, p1: float) -> np.ndarray:
    """Inverse CDF of the residual wait seen by a random observer.

    For waits uniform on [p0, p1] with mean m, the residual has density
    P(W > x) / m: flat up to p0, then falling linearly to zero at p1.
    """
    mu = 0.5 * (p0 + p1)
    x = u * mu
    if p1 > p0:
        width = p1 - p0
        tail = x > p0
        if np.any(tail):
            arg = width * width - 2.0 * width * (x[tail] - p0)
            x[tail] = p1 - np.sqrt(np.maximum(arg, 0.0))
    return x


class RequestGenerator:
    """Clients join at a fixed rate and each emits one request per wait cycle."""

    def __init__(self, cfg, apis: Sequence[Api], rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.pool = ClientPool(cfg.num_clients)
        self.api_names = [a.name for a in apis]
        w = np.array([a.weight for a in apis], dtype=float)
        self.cum_weights = np.cumsum(w / w.sum())
        self.cum_weights[-1] = 1.0
        self.next_id = 0
        self.done = False

    def active(self, t: float) -> bool:
        cfg = self.cfg
        return not self.done and t < cfg.time_limit and self.pool.current_num < cfg.num_limit

    def _spawn(self, t: float, new_total: int) -> None:
        pool, cfg = self.pool, self.cfg
        lo, hi = pool.current_clients, new_total
        m = hi - lo
        if cfg.initial_phase == "immediate":
            pool.waiting[lo:hi] = 0.0
        else:
            # client i joined at i / v and is observed at a random phase of
            # its cycle; stratifying the phases keeps small batches unbiased
            u = (self.rng.permutation(m) + self.rng.random(m)) / m
            joined = np.arange(lo, hi) / cfg.spawn_rate
            pool.waiting[lo:hi] = joined + equilibrium_residual(u, cfg.wait_min, cfg.wait_max) - t
        pool.current_clients = hi

    def generate_tick(self, t: float) -> list[Request]:
        cfg, pool = self.cfg, self.pool
        if not self.active(t):
            self.done = True
            return []
        target = min(int(math.floor(cfg.spawn_rate * t + 1e-9)), pool.capacity)
        if target > pool.current_clients:
            self._spawn(t, target)
        n = pool.current_clients
        timers = pool.waiting[:n]
        firing = np.flatnonzero(timers <= 1e-9)
        room = cfg.num_limit - pool.current_num
        if len(firing) > room:
            firing = firing[: int(room)]
        k = len(firing)
        out: list[Request] = []
        if k:
            timers[firing] += self.rng.uniform(cfg.wait_min, cfg.wait_max, k)
            picks = np.searchsorted(self.cum_weights, self.rng.random(k), side="right")
            names = self.api_names
            base = self.next_id
            out = [Request(base + j, names[int(a)], t) for j, a in enumerate(picks)]
            self.next_id += k
            pool.current_num += k
        timers -= 1.0
        return out


@dataclass(frozen=True)
class Prediction:
    t: float
    clients: float
    rate: float
    cumulative: float


def predict(t: float, num_clients: int, spawn_rate: float, p0: float, p1: float) -> Prediction:
    """Expected clients, arrival rate and cumulative requests at time t."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if not 0 <= p0 <= p1 or p1 <= 0:
        raise ValueError(f"need 0 <= p0 <= p1 and p1 > 0, got [{p0}, {p1}]")
    n = min(float(num_clients), spawn_rate * t)
    s = p0 + p1
    rate = n * 2.0 / s
    knee = num_clients / spawn_rate
    if t <= knee:
        cum = spawn_rate / s * t * t
    else:
        cum = 2.0 * num_clients / s * t - num_clients**2 / (spawn_rate * s)
    return Prediction(t, n, rate, cum)


def predict_cfg(t: float, cfg) -> Prediction:
    return predict(t, cfg.num_clients, cfg.spawn_rate, cfg.wait_min, cfg.wait_max)


def dispatch(req: Request, entry_service: str, system, t: float):
    """Create and enqueue the root cloudlet for a request.

    Returns the cloudlet, or None after marking the request Failed when
    the entry service has no allocated instance.
    """
    try:
        return system.root(req, entry_service, t)
    except NoAllocatedInstance:
        req.status = FAILED
        return None


TRACE_HEADER = ["req_id", "api", "arrival_s"]


def write_trace(requests: Sequence[Request], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow([r.id, r.api, f"{r.arrival:.6f}"])


def read_trace(path: Path) -> list[Request]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Request(int(r["req_id"]), r["api"], float(r["arrival_s"])) for r in rows]


__all__ = [
    "Request", "ClientPool", "RequestGenerator", "Prediction", "predict", "predict_cfg",
    "equilibrium_residual", "dispatch", "NoAllocatedInstance", "write_trace", "read_trace",
    "TRACE_HEADER", "IN_FLIGHT", "COMPLETED", "FAILED",
]
