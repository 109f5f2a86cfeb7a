import random

import pytest

from flowsched.topology import Tier, build_topology


def test_build_rack_pod_counts_at_trace_scale():
    topo = build_topology(12500, 48, 16, 4)
    assert len(topo.machines) == 12500
    # ceil(12500/48) racks, ceil(261/16) pods; trailing ones partial
    assert len(topo.rack_ids()) == 261
    assert len(topo.pod_ids()) == 17
    full = [r for r in topo.rack_ids() if len(topo.rack_members(r)) == 48]
    assert len(full) == 260
    assert len(topo.rack_members(260)) == 12500 - 260 * 48


def test_build_degenerate_single_machine():
    topo = build_topology(1, 48, 16, 1)
    assert len(topo.machines) == 1
    assert topo.rack_ids() == [0]
    assert topo.pod_ids() == [0]


def test_build_two_racks_one_pod():
    topo = build_topology(96, 48, 16, 2)
    assert len(topo.rack_ids()) == 2
    assert len(topo.pod_ids()) == 1


@pytest.mark.parametrize("bad", [(0, 48, 16, 4), (10, 0, 16, 4), (10, 48, 0, 4), (10, 48, 16, 0)])
def test_build_rejects_zero_counts(bad):
    with pytest.raises(ValueError):
        build_topology(*bad)


def test_add_machine_fills_first_nonfull_rack_then_new():
    topo = build_topology(4, 2, 2, 1)  # racks 0,1 full
    assert topo.add_machine(1) == 4
    assert topo.rack_of(4) == 2  # all racks full -> new rack
    topo.remove_machine(1)  # rack 0 now has room
    assert topo.rack_of(topo.add_machine(1)) == 0


def test_remove_machine_reports_running_tasks():
    topo = build_topology(2, 2, 2, 4)
    for t in [("a", 1), ("b", 2), ("c", 3)]:
        topo.assign_task(0, t)
    evicted = topo.remove_machine(0)
    assert sorted(evicted) == [("a", 1), ("b", 2), ("c", 3)]
    assert 0 not in topo.machines
    with pytest.raises(KeyError):
        topo.rack_of(0)


def test_remove_unknown_machine_raises():
    topo = build_topology(2, 2, 2, 1)
    with pytest.raises(KeyError):
        topo.remove_machine(99)


def test_tier_classification():
    topo = build_topology(48 * 16 + 1, 48, 16, 1)
    assert topo.tier_of(5, 5) is Tier.SAME_MACHINE
    assert topo.tier_of(0, 47) is Tier.SAME_RACK
    assert topo.tier_of(0, 48) is Tier.SAME_POD
    assert topo.tier_of(0, 48 * 16) is Tier.INTER_POD


def test_tier_symmetric_and_reflexive_on_random_topology():
    rng = random.Random(3)
    topo = build_topology(100, 7, 3, 2)
    for _ in range(40):  # random add/remove churn
        if rng.random() < 0.4 and len(topo.machines) > 50:
            topo.remove_machine(rng.choice(topo.machine_ids()))
        else:
            topo.add_machine(2)
    ids = topo.machine_ids()
    for _ in range(500):
        a, b = rng.choice(ids), rng.choice(ids)
        assert topo.tier_of(a, b) == topo.tier_of(b, a)
        assert (topo.tier_of(a, b) is Tier.SAME_MACHINE) == (a == b)


def test_partition_and_rack_size_accounting_under_churn():
    rng = random.Random(9)
    topo = build_topology(30, 4, 2, 1)
    for _ in range(200):
        if rng.random() < 0.5 and len(topo.machines) > 5:
            topo.remove_machine(rng.choice(topo.machine_ids()))
        else:
            topo.add_machine(1)
        # every machine in exactly one rack; rack sizes sum to machine count
        total = 0
        seen = set()
        for r in topo.rack_ids():
            members = topo.rack_members(r)
            assert len(members) <= topo.machines_per_rack
            for m in members:
                assert m not in seen
                seen.add(m)
            total += len(members)
        assert total == len(topo.machines)
        assert seen == set(topo.machine_ids())


def test_slot_accounting():
    topo = build_topology(1, 4, 2, 2)
    topo.assign_task(0, "t1")
    assert topo.free_slots(0) == 1
    topo.assign_task(0, "t2")
    with pytest.raises(RuntimeError):
        topo.assign_task(0, "t3")
    topo.release_task(0, "t1")
    assert topo.free_slots(0) == 1
