"""Discrete-event kernel: future-event list, virtual clock, handler registry."""

from __future__ import annotations

import heapq
import itertools
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable

import numpy as np


class EventKind(IntEnum):
    GENERATE = 0
    DISPATCH = 1
    START_EXECUTION = 2
    DERIVE = 3
    CLOUDLET_COMPLETE = 4
    SCALING_CHECK = 5
    MIGRATION_CHECK = 6
    METRICS_SAMPLE = 7
    END_SIMULATION = 8


@dataclass(slots=True)
class SimEvent:
    fire_at: float
    kind: EventKind
    payload: Any = None
    seq: int = -1


@dataclass
class SimSummary:
    clock: float
    processed: Counter = field(default_factory=Counter)
    scheduled: int = 0
    remaining: int = 0
    timed_out: bool = False  # stopped by the wall-clock budget

    @property
    def total(self) -> int:
        return sum(self.processed.values())


class SchedulingError(RuntimeError):
    """An event was scheduled in the simulated past."""


Handler = Callable[[SimEvent], None]


WALL_CHECK_EVERY = 4096


class Simulator:
    """Single-threaded event loop.

    Events are delivered in ``(fire_at, seq)`` order, so events sharing a
    timestamp come out in insertion order. The kernel also owns the run's
    random generator; every stochastic draw in a simulation goes through
    ``self.rng`` so a seed fully determines the trajectory.
    """

    def __init__(self, seed: int = 0):
        self.clock = 0.0
        self.rng = np.random.default_rng(seed)
        self._queue: list[tuple[float, int, SimEvent]] = []
        self._seq = itertools.count()
        self._handlers: dict[EventKind, Handler] = {}
        self._stopped = False
        self.scheduled = 0
        self.processed: Counter = Counter()

    def register(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, event: SimEvent) -> SimEvent:
        t = event.fire_at
        if t < self.clock or not math.isfinite(t):
            raise SchedulingError(
                f"cannot schedule {event.kind.name} at t={t!r} (clock={self.clock!r})"
            )
        event.seq = next(self._seq)
        heapq.heappush(self._queue, (t, event.seq, event))
        self.scheduled += 1
        return event

    def at(self, t: float, kind: EventKind, payload: Any = None) -> SimEvent:
        return self.schedule(SimEvent(t, kind, payload))

    def stop(self) -> None:
        """Stop the loop after the current handler returns."""
        self._stopped = True

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> float | None:
        return self._queue[0][0] if self._queue else None

    def run(self, until: float | None = None, wall_budget: float | None = None) -> SimSummary:
        """Deliver events until the queue drains, ``until`` passes or stop().

        ``wall_budget`` (seconds of real time) is checked every
        WALL_CHECK_EVERY events; exceeding it ends the run early with
        ``timed_out`` set on the summary.
        """
        queue = self._queue
        handlers = self._handlers
        processed = self.processed
        pop = heapq.heappop
        self._stopped = False
        timed_out = False
        deadline = time.perf_counter() + wall_budget if wall_budget is not None else None
        countdown = WALL_CHECK_EVERY
        while queue and not self._stopped:
            if until is not None and queue[0][0] > until:
                break
            if deadline is not None:
                countdown -= 1
                if countdown == 0:
                    countdown = WALL_CHECK_EVERY
                    if time.perf_counter() > deadline:
                        timed_out = True
                        break
            t, _, event = pop(queue)
            self.clock = t
            handler = handlers.get(event.kind)
            if handler is None:
                raise KeyError(f"no handler registered for {event.kind.name}")
            handler(event)
            processed[event.kind] += 1
        return SimSummary(
            clock=self.clock,
            processed=Counter(processed),
            scheduled=self.scheduled,
            remaining=len(queue),
            timed_out=timed_out,
        )
