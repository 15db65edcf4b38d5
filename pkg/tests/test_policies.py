from __future__ import annotations

import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microsim.model import Api, Deployment, Instance, InstanceSpec, ReplicaSet, Service, Vm, build_graph
from microsim.policies import (
    APPLIED,
    DOWN,
    FAILED,
    IN,
    OUT,
    SKIPPED,
    UP,
    InvariantViolation,
    Provisioner,
    allocate_all,
    migration_check,
    retire_instance,
    scale_horizontal,
    scale_vertical,
    scaling_trigger,
    vertical_target,
)

import alloc_fixture


def test_allocation_follows_hand_trace():
    dep = alloc_fixture.build()
    prov = alloc_fixture.RecordingProvisioner(dep.vms.values())
    allocate_all(dep, prov)
    want = [(i, v, {k: (float(s), float(r)) for k, (s, r) in idle.items()})
            for i, v, idle in alloc_fixture.TRACE]
    assert prov.steps == want
    assert prov.failed == alloc_fixture.UNPLACED
    prov.check(dep)
    dep.check_consistency()


@given(st.lists(st.integers(1, 40), min_size=2, max_size=6, unique=True),
       st.lists(st.integers(1, 30), min_size=1, max_size=12))
@settings(max_examples=100, deadline=None)
def test_each_placement_targets_most_idle_feasible_vm(vm_sizes, inst_sizes):
    # distinct idle shares; every placement must land on the argmax among VMs that fit
    g = build_graph([Service("s")], [Api("x", "s")])
    sets = []
    for k, size in enumerate(inst_sizes):
        rs = ReplicaSet(f"r{k}", InstanceSpec(labels=frozenset({"s"}), requested_shares=size * 100.0,
                                              limit_shares=size * 100.0))
        rs.replicas.append(rs.mint().id)
        sets.append(rs)
    vms = [Vm(f"v{k}", 1000.0, 1, 1e6, 1e6, s * 100.0) for k, s in enumerate(vm_sizes)]
    dep = Deployment.from_replica_sets(g, sets, vms)

    class Checking(Provisioner):
        def grant(self, inst, vm_id):
            feasible = [v for v in self.vm_order if self.fits(v, inst)]
            best = max(self.ledgers[v].idle_shares for v in feasible)
            assert self.ledgers[vm_id].idle_shares == best
            return super().grant(inst, vm_id)

    prov = Checking(vms)
    allocate_all(dep, prov)
    prov.check(dep)


def test_grant_guards():
    vm = Vm("v", 1000.0, 1, 100.0, 10.0)
    prov = Provisioner([vm], gate_bandwidth=True)
    inst = Instance.from_spec("i", InstanceSpec(requested_shares=500, limit_shares=500,
                                                requested_ram=50, limit_ram=50, bandwidth=20))
    assert not prov.fits("v", inst)  # bandwidth gated
    with pytest.raises(InvariantViolation):
        prov.grant(inst, "v")
    prov.gate_bandwidth = False
    prov.grant(inst, "v")
    with pytest.raises(InvariantViolation):
        prov.grant(inst, "v")


def test_scaling_trigger():
    assert scaling_trigger([0.9, 0.95], 0.8, 0.2, 2) == OUT
    assert scaling_trigger([0.1, 0.9, 0.95], 0.8, 0.2, 2) == OUT
    assert scaling_trigger([0.9, 0.5], 0.8, 0.2, 2) is None
    assert scaling_trigger([0.1, 0.1], 0.8, 0.2, 2, UP, DOWN) == DOWN
    assert scaling_trigger([0.9], 0.8, 0.2, 2) is None


def test_vertical_target_floor_and_ram():
    spec = InstanceSpec(requested_shares=400, limit_shares=800, requested_ram=64, limit_ram=128)
    orig = Instance.from_spec("i", spec)
    inst = Instance.from_spec("i", spec)
    assert vertical_target(inst, orig, UP, 2.0) == (800, 1600, 64, 128)
    inst.set_resources((800, 1600, 64, 128))
    assert vertical_target(inst, orig, DOWN, 4.0) == (400, 400, 64, 128)
    with pytest.raises(ValueError):
        vertical_target(inst, orig, OUT, 2.0)


def _small(vm_shares=(2000.0, 2000.0), replicas=1, lo=1, hi=3, req=500.0):
    g = build_graph([Service("a"), Service("b")], [Api("x", "a")])
    sets = []
    for s in ("a", "b"):
        rs = ReplicaSet(s, InstanceSpec(labels=frozenset({s}), requested_shares=req, limit_shares=2 * req,
                                        requested_ram=10, limit_ram=20), min_replicas=lo, max_replicas=hi)
        for _ in range(replicas):
            rs.replicas.append(rs.mint().id)
        sets.append(rs)
    vms = [Vm(f"v{k}", 1000.0, 2, 1000.0, 1000.0, s) for k, s in enumerate(vm_shares)]
    dep = Deployment.from_replica_sets(g, sets, vms)
    prov = Provisioner(vms)
    allocate_all(dep, prov)
    return dep, prov


def test_horizontal_out_in_and_bounds():
    dep, prov = _small()
    d = scale_horizontal(0, "a", OUT, dep, prov)
    assert d.outcome == APPLIED and d.changed == ["a-1"] and d.replicas_after == 2
    assert dep.service_instances["a"] == ["a-0", "a-1"]
    scale_horizontal(0, "a", OUT, dep, prov)
    d = scale_horizontal(0, "a", OUT, dep, prov)
    assert d.outcome == SKIPPED  # at maxReplicas
    d = scale_horizontal(0, "a", IN, dep, prov, load_of={"a-0": 3, "a-1": 0, "a-2": 0}.get)
    # least loaded, newest first among equals
    assert d.changed == ["a-2"] and dep.instances["a-2"].draining
    retire_instance("a-2", dep, prov)
    scale_horizontal(0, "a", IN, dep, prov)
    d = scale_horizontal(0, "a", IN, dep, prov)
    assert d.outcome == SKIPPED  # at minReplicas
    prov.check(dep)
    dep.check_consistency()


def test_vertical_up_moves_or_fails():
    dep, prov = _small(vm_shares=(2000.0, 2000.0))
    # a-0 on v0 and b-0 on v1, 1500 idle each; Up x2 needs 1000 -> fits in place
    d = scale_vertical(0, "a", UP, dep, prov, 2.0)
    assert d.outcome == APPLIED and dep.instances["a-0"].requested_shares == 1000
    # again x2 needs 2000 on a 2000 VM already holding 0 others -> fits in place
    d = scale_vertical(0, "a", UP, dep, prov, 2.0)
    assert d.outcome == APPLIED and dep.instances["a-0"].requested_shares == 2000
    before = (prov.snapshot(), dep.instances["a-0"].resources())
    d = scale_vertical(0, "a", UP, dep, prov, 2.0)
    assert d.outcome == FAILED and d.failed_list == ["a-0"]
    assert prov.snapshot()["ledgers"] == before[0]["ledgers"]
    assert prov.grants == before[0]["grants"]
    assert dep.instances["a-0"].resources() == before[1]
    d = scale_vertical(0, "a", DOWN, dep, prov, 2.0)
    assert d.outcome == APPLIED and dep.instances["a-0"].requested_shares == 1000
    prov.check(dep)


def test_migration_relieves_overloaded_vm():
    dep, prov = _small(vm_shares=(2000.0, 2000.0, 2000.0), replicas=2)
    # force everything of service a onto v0
    for iid in list(prov.grants):
        prov.release(iid)
        dep.bind_host(iid, None)
    for iid in ("a-0", "a-1", "b-0"):
        prov.grant(dep.instances[iid], "v0")
        dep.bind_host(iid, "v0")
    moves = migration_check(1.0, dep, prov, threshold=0.5)
    assert len(moves) == 1 and moves[0].outcome == "Migrated" and moves[0].source == "v0"
    assert prov.ledgers["v0"].utilization == 0.5
    prov.check(dep)
    # nothing can absorb a full VM without crossing the threshold
    dep2, prov2 = _small(vm_shares=(1000.0, 1000.0), req=1000.0)
    moves = migration_check(1.0, dep2, prov2, threshold=0.5)
    assert [m.outcome for m in moves] == ["NoTargetVm", "NoTargetVm"]


# -- rollback soundness over random scaling sequences ---------------------------

ops = st.lists(
    st.one_of(
        st.tuples(st.just("hs"), st.sampled_from("ab"), st.sampled_from([OUT, IN])),
        st.tuples(st.just("vs"), st.sampled_from("ab"), st.sampled_from([UP, DOWN])),
        st.tuples(st.just("fill"), st.integers(0, 2), st.floats(0.0, 1.0)),
        st.tuples(st.just("free"), st.integers(0, 2), st.just(0)),
        st.tuples(st.just("retire"), st.sampled_from("ab"), st.just(0)),
    ),
    min_size=1, max_size=25,
)


def _fill(dep: Deployment, prov: Provisioner, vm: str, frac: float, k: int) -> None:
    """Inject a filler grant eating ``frac`` of a VM's idle shares and RAM."""
    led = prov.ledgers[vm]
    inst = Instance.from_spec(f"filler-{k}", InstanceSpec(
        labels=frozenset({"filler"}), requested_shares=led.idle_shares * frac,
        limit_shares=led.idle_shares * frac, requested_ram=led.idle_ram * frac,
        limit_ram=led.idle_ram * frac, bandwidth=0.0))
    dep.add_instance(inst)
    prov.grant(inst, vm)
    dep.bind_host(inst.id, vm)


def run_scaling_sequence(seq, factor=2.0):
    dep, prov = _small(vm_shares=(2000.0, 2000.0, 1500.0), lo=1, hi=3)
    templates = {n: rs.template.requested_shares for n, rs in dep.replica_sets.items()}
    n_failed = 0
    for k, (kind, arg, extra) in enumerate(seq):
        if kind == "fill":
            vm = f"v{arg}"
            if prov.ledgers[vm].idle_shares > 0:
                _fill(dep, prov, vm, extra, k)
            continue
        if kind == "free":
            fillers = [i for i in dep.vms[f"v{arg}"].hosted if i.startswith("filler")]
            for iid in sorted(fillers):
                retire_instance(iid, dep, prov)
            continue
        if kind == "retire":
            for iid in [i for i in dep.service_instances[arg] if dep.instances[i].draining]:
                retire_instance(iid, dep, prov)
            continue
        dep_before = copy.deepcopy(dep.snapshot())
        prov_before = copy.deepcopy(prov.snapshot())
        res_before = {i: inst.resources() for i, inst in dep.instances.items()}
        log_before = len(prov.failed)
        if kind == "hs":
            d = scale_horizontal(0.0, arg, extra, dep, prov)
        else:
            d = scale_vertical(0.0, arg, extra, dep, prov, factor)
        if d.outcome == FAILED:
            n_failed += 1
            assert dep.snapshot() == dep_before
            assert prov.snapshot()["ledgers"] == prov_before["ledgers"]
            assert prov.grants == prov_before["grants"]
        # the failure log is append-only and grows by exactly this decision's failures
        assert prov.failed[:log_before] == prov_before["failed"]
        assert prov.failed[log_before:] == d.failed_list
        for iid in d.failed_list:
            # a failed resize keeps the instance's exact prior grant and size
            assert prov.grants[iid] == prov_before["grants"][iid]
            assert dep.instances[iid].resources() == res_before[iid]
        prov.check(dep)
        dep.check_consistency()
        for name, rs in dep.replica_sets.items():
            active = [i for i in rs.replicas if not dep.instances[i].draining]
            assert rs.min_replicas <= len(active) <= rs.max_replicas
            for iid in rs.replicas:
                assert dep.instances[iid].requested_shares >= templates[name]
    return n_failed


@given(ops)
@settings(max_examples=200, deadline=None)
def test_failed_scaling_leaves_state_untouched(seq):
    run_scaling_sequence(seq)


def test_rollback_sequence_exercises_failures():
    # fills the cluster, then asks for more: both policies must fail at least once
    seq = [("fill", v, 1.0) for v in range(3)] + [("hs", "a", OUT), ("vs", "b", UP)]
    assert run_scaling_sequence(seq) == 2
