from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microsim.model import Api
from microsim.registry import GeneratorConfig
from microsim.workload import (
    FAILED,
    RequestGenerator,
    equilibrium_residual,
    predict,
    read_trace,
    write_trace,
)

from oracles import generator_counts

# chi-square critical values at the 1% level, by degrees of freedom
CHI2_99 = {1: 6.635, 2: 9.210, 3: 11.345, 4: 13.277, 5: 15.086}


def gen(nc=1000, v=100.0, p=(5.0, 15.0), seed=0, apis=None, **kw):
    cfg = GeneratorConfig(num_clients=nc, spawn_rate=v, wait_min=p[0], wait_max=p[1], **kw)
    return RequestGenerator(cfg, apis or [Api("a", "A")], np.random.default_rng(seed))


def run_ticks(g, horizon):
    per_tick = []
    for t in range(int(horizon) + 1):
        per_tick.append(g.generate_tick(float(t)))
    return per_tick


@given(st.integers(1, 400), st.floats(0.5, 80), st.integers(0, 60))
@settings(max_examples=60, deadline=None)
def test_clients_curve_exact(nc, v, horizon):
    g = gen(nc, v, (1.0, 3.0), time_limit=1e9)
    counts = []
    for t in range(horizon + 1):
        g.generate_tick(float(t))
        counts.append(g.pool.current_clients)
    assert counts == generator_counts(range(horizon + 1), nc, v)


@pytest.mark.parametrize("nc,v,p", [(200, 20.0, (1.0, 3.0)), (1000, 100.0, (5.0, 15.0)), (300, 7.5, (2.0, 2.0))])
def test_steady_rate_and_cumulative(nc, v, p):
    horizon = 10 * nc / v
    g = gen(nc, v, p, time_limit=horizon + 1)
    ticks = run_ticks(g, horizon)
    counts = [len(x) for x in ticks]
    half = int(horizon / 2)
    qps = sum(counts[half:]) / len(counts[half:])
    assert qps == pytest.approx(nc * 2 / (p[0] + p[1]), rel=0.10)
    cum = np.cumsum(counts)
    for t in (nc / v, 2 * nc / v):
        # R(t) counts requests emitted on ticks 0..t
        assert cum[int(t)] == pytest.approx(predict(t, nc, v, *p).cumulative, rel=0.10)


def test_weight_law_chi_square():
    apis = [Api("w1", "A", 1.0), Api("w2", "A", 2.0), Api("w3", "A", 3.0), Api("w4", "A", 4.0)]
    g = gen(2000, 200.0, (1.0, 2.0), apis=apis, time_limit=40)
    names = [r.api for tick in run_ticks(g, 40) for r in tick]
    assert len(names) >= 10_000
    total = sum(a.weight for a in apis)
    stat = 0.0
    for a in apis:
        expected = len(names) * a.weight / total
        stat += (names.count(a.name) - expected) ** 2 / expected
    assert stat < CHI2_99[len(apis) - 1]


@given(st.integers(1, 300), st.integers(1, 500), st.integers(1, 40), st.booleans())
@settings(max_examples=60, deadline=None)
def test_hard_stops(nc, num_limit, time_limit, immediate):
    g = gen(nc, 25.0, (0.5, 2.0), num_limit=num_limit, time_limit=float(time_limit),
            initial_phase="immediate" if immediate else "stationary")
    reqs = [r for tick in run_ticks(g, time_limit + 5) for r in tick]
    assert len(reqs) <= num_limit
    assert all(r.arrival <= time_limit for r in reqs)
    assert [r.id for r in reqs] == list(range(len(reqs)))
    assert all(r.arrival >= 0 for r in reqs)


def test_immediate_phase_fires_on_join():
    g = gen(10, 5.0, (4.0, 4.0), initial_phase="immediate", time_limit=100)
    ticks = run_ticks(g, 1)
    assert [len(x) for x in ticks] == [0, 5]


def test_timers_stay_bounded():
    g = gen(500, 50.0, (2.0, 6.0), time_limit=200)
    for t in range(200):
        g.generate_tick(float(t))
        w = g.pool.waiting[: g.pool.current_clients]
        if len(w):
            # carry-over keeps a fractional overshoot below one tick
            assert w.min() > -1.0 - 1e-9 and w.max() <= 6.0 + 1e-9


def test_equilibrium_residual_distribution():
    u = (np.arange(100_000) + 0.5) / 100_000
    x = equilibrium_residual(u.copy(), 5.0, 15.0)
    assert x.min() >= 0 and x.max() <= 15.0
    # mean residual of U[a,b] waits is E[W^2] / (2 E[W])
    ew, ew2 = 10.0, (15.0**3 - 5.0**3) / (3 * 10.0)
    assert x.mean() == pytest.approx(ew2 / (2 * ew), rel=1e-3)
    # constant waits give a uniform residual
    y = equilibrium_residual(u.copy(), 4.0, 4.0)
    assert y.mean() == pytest.approx(2.0, rel=1e-6)


def test_predict_closed_forms():
    p = predict(10.0, 1000, 100.0, 5.0, 15.0)
    assert (p.clients, p.rate) == (1000.0, 100.0)
    assert predict(5.0, 1000, 100.0, 5.0, 15.0).cumulative == pytest.approx(125.0)
    assert predict(60.0, 1000, 100.0, 5.0, 15.0).cumulative == pytest.approx(5500.0)
    # both branches agree at the knee
    lo = predict(10.0 - 1e-9, 1000, 100.0, 5.0, 15.0).cumulative
    hi = predict(10.0 + 1e-9, 1000, 100.0, 5.0, 15.0).cumulative
    assert lo == pytest.approx(hi, rel=1e-6)
    with pytest.raises(ValueError):
        predict(-1, 10, 1, 1, 2)
    with pytest.raises(ValueError):
        predict(1, 10, 1, 3, 2)


@given(st.floats(0, 1e4), st.integers(1, 10_000), st.floats(0.1, 1e3), st.floats(0.1, 20), st.floats(0, 20))
@settings(max_examples=100, deadline=None)
def test_cumulative_is_integral_of_rate(t, nc, v, p0, extra):
    p1 = p0 + extra
    # numeric integral of the rate curve, which is piecewise linear
    knee = nc / v
    s = p0 + p1
    if t <= knee:
        area = v * t * t / s
    else:
        area = v * knee * knee / s + 2 * nc / s * (t - knee)
    assert predict(t, nc, v, p0, p1).cumulative == pytest.approx(area, rel=1e-9, abs=1e-9)


def test_trace_round_trip(tmp_path):
    g = gen(50, 10.0, (1.0, 2.0), apis=[Api("x", "A"), Api("y", "A")], time_limit=20)
    reqs = [r for tick in run_ticks(g, 20) for r in tick]
    path = tmp_path / "trace.csv"
    write_trace(reqs, path)
    back = read_trace(path)
    assert [(r.id, r.api, r.arrival) for r in back] == [(r.id, r.api, r.arrival) for r in reqs]


def test_dispatch_marks_failed_without_instances():
    from microsim.model import Service, build_graph
    from microsim.registry import SchedulerConfig
    from microsim.scheduling import LengthSampler, SchedulingSystem
    from microsim.workload import Request, dispatch

    g = build_graph([Service("A")], [Api("x", "A")])
    system = SchedulingSystem(g, LengthSampler(np.random.default_rng(0), 1.0, 0.0), SchedulerConfig())
    req = Request(0, "x", 0.0)
    assert dispatch(req, "A", system, 0.0) is None
    assert req.status == FAILED and not math.isnan(req.arrival)
