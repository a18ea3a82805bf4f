import heapq
import io
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetadmit.dispatch import (
    DeviceQueue,
    QueueSet,
    detect_and_plan,
    dispatch,
    recommend_affinity,
    release,
)
from hetadmit.domain import DeviceKind, Placement, Query, QueuePlan, validate_fleet
from hetadmit.errors import InvalidTopology, NoDevices, UnderflowRelease

ACC, CPU = DeviceKind.ACCELERATOR, DeviceKind.CPU


def queues(acc_len, acc_limit, cpu_len=0, cpu_limit=0, hetero=True):
    qs = QueueSet(DeviceQueue(ACC, acc_limit), DeviceQueue(CPU, cpu_limit), hetero)
    qs.primary.current_length = acc_len
    qs.offload.current_length = cpu_len
    return qs


def test_accelerator_admits_while_not_full():
    qs = queues(3, 10, 0, 8)
    assert dispatch(Query(1), qs) is Placement.ACCELERATOR
    assert qs.primary.current_length == 4


def test_overflow_goes_to_cpu():
    qs = queues(10, 10, 1, 8)
    assert dispatch(Query(1), qs) is Placement.CPU
    assert qs.offload.current_length == 2


def test_busy_when_heterogeneous_disabled():
    qs = queues(10, 10, 1, 8, hetero=False)
    assert dispatch(Query(1), qs) is Placement.BUSY
    assert (qs.primary.current_length, qs.offload.current_length) == (10, 1)


def test_busy_when_both_full():
    qs = queues(10, 10, 8, 8)
    assert dispatch(Query(1), qs) is Placement.BUSY
    assert (qs.primary.current_length, qs.offload.current_length) == (10, 8)


def test_per_call_override_of_heterogeneous_flag():
    qs = queues(10, 10, 0, 8)
    assert dispatch(Query(1), qs, heterogeneous_enabled=False) is Placement.BUSY


def test_release():
    qs = queues(4, 10, 0, 8)
    release(Placement.ACCELERATOR, qs)
    assert qs.primary.current_length == 3
    with pytest.raises(UnderflowRelease):
        release(Placement.CPU, qs)
    with pytest.raises(UnderflowRelease):
        release(Placement.BUSY, qs)


def test_admit_release_roundtrip():
    qs = queues(2, 10, 8, 8)
    before = qs.snapshot()
    p = dispatch(Query(1), qs)
    release(p, qs)
    assert qs.snapshot() == before


def test_decision_log_records_pre_admission_lengths():
    qs = queues(9, 10, 0, 2)
    for i in range(4):
        dispatch(Query(i, arrival_time=float(i)), qs)
    buf = io.StringIO()
    qs.log.write_jsonl(buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["placement"] for r in rows] == ["accelerator", "cpu", "cpu", "busy"]
    assert rows[1] == {"id": 1, "placement": "cpu", "acc_len": 10, "cpu_len": 0, "t": 1.0}
    assert len(qs.log) == 4


def test_detect_cpu_only_forces_heterogeneous_off(xeon):
    qs = detect_and_plan(validate_fleet([xeon]), QueuePlan(0, 8, True), True)
    assert qs.primary.kind is CPU and qs.primary.depth_limit == 8
    assert qs.offload is None and not qs.heterogeneous_enabled
    assert dispatch(Query(1), qs) is Placement.CPU


def test_detect_mixed_without_flag_is_accelerator_only(v100, xeon):
    qs = detect_and_plan(validate_fleet([v100, xeon]), QueuePlan(40, 8), False)
    assert qs.primary.kind is ACC and qs.offload is None
    assert not qs.heterogeneous_enabled


def test_detect_mixed_with_flag_builds_both(v100, xeon):
    qs = detect_and_plan(validate_fleet([v100, xeon]), QueuePlan(40, 8), True)
    assert (qs.primary.depth_limit, qs.offload.depth_limit) == (40, 8)
    assert qs.heterogeneous_enabled


def test_detect_accelerator_only(v100):
    qs = detect_and_plan(validate_fleet([v100]), QueuePlan(40, 8), True)
    assert qs.offload is None and not qs.heterogeneous_enabled


def test_detect_requires_devices():
    with pytest.raises(NoDevices):
        detect_and_plan([], QueuePlan(1, 0, False))


def test_affinity_two_socket_topology():
    plan = recommend_affinity(128, 4, 0.25)
    assert plan.cores == list(range(127, 31, -1))
    assert plan.groups == [list(range(127, 95, -1)), list(range(95, 63, -1)), list(range(63, 31, -1))]
    assert plan.reserved == list(range(32))
    assert plan.cpu_list() == "96-127,64-95,32-63"


def test_affinity_single_node_no_reserve():
    assert recommend_affinity(8, 1, 0).cores == [7, 6, 5, 4, 3, 2, 1, 0]


def test_affinity_reserve_aligned_to_first_node():
    # 12 cores on 4 nodes of 3; reserving 3 drops exactly node 0
    plan = recommend_affinity(12, 4, 0.25)
    assert plan.cores == [11, 10, 9, 8, 7, 6, 5, 4, 3]
    assert plan.groups == [[11, 10, 9], [8, 7, 6], [5, 4, 3]]


def test_affinity_partial_node_stays_grouped():
    plan = recommend_affinity(16, 2, 0.25)
    assert plan.groups == [list(range(15, 7, -1)), [7, 6, 5, 4]]


@pytest.mark.parametrize("args", [(10, 4, 0.25), (8, 0, 0), (8, 2, 1.0), (8, 2, -0.1), (0, 1, 0)])
def test_affinity_invalid_topology(args):
    with pytest.raises(InvalidTopology):
        recommend_affinity(*args)


@given(st.integers(1, 16), st.integers(1, 16), st.floats(0, 0.95))
def test_affinity_groups_never_cross_numa(nodes, per_node, frac):
    total = nodes * per_node
    try:
        plan = recommend_affinity(total, nodes, frac)
    except InvalidTopology:
        assert int(frac * total) >= total
        return
    assert plan.cores == sorted(plan.cores, reverse=True)
    assert set(plan.cores).isdisjoint(plan.reserved)
    assert len(plan.cores) + len(plan.reserved) == total
    for g in plan.groups:
        assert len({c // per_node for c in g}) == 1


def replay(trace, acc_limit, cpu_limit, hetero):
    """Dispatch timed arrivals with fixed service times; count admissions."""
    qs = QueueSet(DeviceQueue(ACC, acc_limit), DeviceQueue(CPU, cpu_limit), hetero)
    pending = []
    accepted = 0
    t = 0.0
    for i, (gap, service) in enumerate(trace):
        t += gap
        while pending and pending[0][0] <= t:
            _, _, placement = heapq.heappop(pending)
            qs.release(placement)
        p = qs.dispatch(Query(i))
        if p is not Placement.BUSY:
            accepted += 1
            heapq.heappush(pending, (t + service, i, p))
    return accepted


traces = st.lists(st.tuples(st.floats(0, 1), st.floats(0.01, 5)), max_size=200)


@given(traces, st.integers(0, 10), st.integers(0, 10))
def test_heterogeneous_dispatch_never_accepts_fewer(trace, acc_limit, cpu_limit):
    assert replay(trace, acc_limit, cpu_limit, True) >= replay(trace, acc_limit, cpu_limit, False)
