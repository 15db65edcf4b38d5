"""Independent reference implementations used to check the simulator."""

from __future__ import annotations

import itertools
import math

STEP = 1e-3


def fixed_step_shares(jobs: list[tuple[float, float]], mips: float,
                      weights: list[float] | None = None, step: float = STEP) -> list[float]:
    """Finish times under processor sharing, advanced in fixed steps.

    Every step, each active job's remaining MI is reduced by its weighted
    share of ``mips * step``. A job that runs out partway through a step
    finishes at the interpolated instant, and the capacity it leaves unused
    is handed to the others for the rest of that step. Arrivals are assumed
    to lie on the step grid.
    """
    n = len(jobs)
    w = weights or [1.0] * n
    remaining = [length for _, length in jobs]
    finish = [math.nan] * n
    arrive_step = [round(a / step) for a, _ in jobs]
    done = 0
    k = 0
    while done < n:
        t0 = k * step
        active = [i for i in range(n) if arrive_step[i] <= k and math.isnan(finish[i])]
        if not active:
            # idle until the next arrival
            k = min(arrive_step[i] for i in range(n) if math.isnan(finish[i]))
            continue
        left = step  # unused time in this step
        while active and left > 0:
            wsum = sum(w[i] for i in active)
            # time until the first active job would run dry at the current split
            dt_first = min(remaining[i] * wsum / (w[i] * mips) for i in active)
            dt = min(left, dt_first)
            for i in active:
                remaining[i] -= w[i] * mips / wsum * dt
            left -= dt
            still = []
            for i in active:
                if remaining[i] <= 1e-9 * max(1.0, jobs[i][1]):
                    finish[i] = t0 + (step - left)
                    done += 1
                else:
                    still.append(i)
            active = still
        k += 1
    return finish


def all_paths(entry: str, forward: dict[str, list[str]]) -> list[tuple[str, ...]]:
    if not forward[entry]:
        return [(entry,)]
    return [(entry,) + rest for c in forward[entry] for rest in all_paths(c, forward)]


def brute_force_critical_path(entry: str, forward: dict[str, list[str]],
                              delay: dict[str, float]) -> tuple[float, tuple[str, ...]]:
    """Max-delay path by enumerating every entry-to-leaf path; the first one wins ties."""
    best, best_path = -math.inf, ()
    for p in all_paths(entry, forward):
        d = sum(delay[s] for s in p)
        if d > best:
            best, best_path = d, p
    return best, best_path


def generator_counts(times, nc: int, v: float) -> list[int]:
    """Clients joined by each tick: floor(v t) capped at nc, counted by hand."""
    out = []
    for t in times:
        joined = 0
        for _ in itertools.count():
            if joined >= nc or (joined + 1) > v * t + 1e-9:
                break
            joined += 1
        out.append(joined)
    return out
