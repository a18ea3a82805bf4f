"""Bounded per-device admission queues and the overflow dispatch policy.

A queue here is an admission counter over in-flight queries, not a FIFO:
its depth is the device's maximum SLO-safe concurrency. Queries go to the
accelerator while it has room, overflow to the CPU when heterogeneous
dispatch is on, and are refused as busy otherwise.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import IO, Callable, Iterator

from .domain import DeviceKind, Fleet, Placement, Query, QueuePlan, validate_fleet
from .errors import InvalidTopology, NoDevices, UnderflowRelease


class DeviceQueue:
    """In-flight counter bounded by ``depth_limit``.

    Not synchronized on its own; :class:`QueueSet` serializes all access.
    """

    def __init__(self, kind: DeviceKind, depth_limit: int):
        if depth_limit < 0:
            raise ValueError(f"depth_limit must be >= 0, got {depth_limit}")
        self.kind = kind
        self.depth_limit = depth_limit
        self.current_length = 0
        self.admitted = 0
        self.released = 0

    @property
    def full(self) -> bool:
        return self.current_length >= self.depth_limit

    def _admit(self) -> None:
        self.current_length += 1
        self.admitted += 1

    def _release(self) -> None:
        if self.current_length == 0:
            raise UnderflowRelease(f"release on empty {self.kind.value} queue")
        self.current_length -= 1
        self.released += 1

    def __repr__(self) -> str:
        return f"DeviceQueue({self.kind.value}, {self.current_length}/{self.depth_limit})"


@dataclass(frozen=True)
class DecisionRecord:
    id: int | str
    placement: Placement
    acc_len: int | None
    cpu_len: int | None
    t: float

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "placement": self.placement.value,
            "acc_len": self.acc_len,
            "cpu_len": self.cpu_len,
            "t": self.t,
        }


class DispatchDecisionLog:
    """Append-only record of every dispatch decision.

    Records hold queue lengths as seen at decision time, before the admit.
    An optional ``sink`` receives each record as it is appended.
    """

    def __init__(self, keep: bool = True, sink: Callable[[DecisionRecord], None] | None = None):
        self._records: list[DecisionRecord] = []
        self._keep = keep
        self._sink = sink
        self._count = 0

    def append(self, record: DecisionRecord) -> None:
        self._count += 1
        if self._keep:
            self._records.append(record)
        if self._sink is not None:
            self._sink(record)

    def __len__(self) -> int:
        return self._count

    def __iter__(self) -> Iterator[DecisionRecord]:
        return iter(list(self._records))

    def write_jsonl(self, fh: IO[str]) -> None:
        for record in self._records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


class QueueSet:
    """The queues created for one fleet plus the dispatch policy over them.

    ``dispatch`` and ``release`` are thread-safe; the check of queue room
    and the counter increment happen under a single lock, and nothing
    blocks on worker execution while holding it.
    """

    def __init__(
        self,
        primary: DeviceQueue,
        offload: DeviceQueue | None = None,
        heterogeneous_enabled: bool = False,
        log: DispatchDecisionLog | None = None,
    ):
        if offload is not None and offload.kind is primary.kind:
            raise ValueError("primary and offload queues must be different device kinds")
        self.primary = primary
        self.offload = offload
        self.heterogeneous_enabled = heterogeneous_enabled and offload is not None
        self.log = log if log is not None else DispatchDecisionLog()
        self._lock = threading.Lock()

    def queue(self, kind: DeviceKind) -> DeviceQueue | None:
        if self.primary.kind is kind:
            return self.primary
        if self.offload is not None and self.offload.kind is kind:
            return self.offload
        return None

    @property
    def queues(self) -> tuple[DeviceQueue, ...]:
        return (self.primary,) if self.offload is None else (self.primary, self.offload)

    def _lengths(self) -> tuple[int | None, int | None]:
        acc = self.queue(DeviceKind.ACCELERATOR)
        cpu = self.queue(DeviceKind.CPU)
        return (
            None if acc is None else acc.current_length,
            None if cpu is None else cpu.current_length,
        )

    def dispatch(self, query: Query, heterogeneous_enabled: bool | None = None, t: float | None = None) -> Placement:
        hetero = self.heterogeneous_enabled if heterogeneous_enabled is None else heterogeneous_enabled
        with self._lock:
            acc_len, cpu_len = self._lengths()
            if not self.primary.full:
                self.primary._admit()
                placement = Placement.for_kind(self.primary.kind)
            elif hetero and self.offload is not None and not self.offload.full:
                self.offload._admit()
                placement = Placement.for_kind(self.offload.kind)
            else:
                placement = Placement.BUSY
            self.log.append(
                DecisionRecord(query.id, placement, acc_len, cpu_len, query.arrival_time if t is None else t)
            )
        return placement

    def release(self, placement: Placement) -> None:
        kind = placement.kind
        queue = None if kind is None else self.queue(kind)
        if queue is None:
            raise UnderflowRelease(f"no admitted query to release for placement {placement.value}")
        with self._lock:
            queue._release()

    def snapshot(self) -> dict[str, tuple[int, int]]:
        """``{kind: (current_length, depth_limit)}`` taken atomically."""
        with self._lock:
            return {q.kind.value: (q.current_length, q.depth_limit) for q in self.queues}


def dispatch(query: Query, queues: QueueSet, heterogeneous_enabled: bool | None = None) -> Placement:
    return queues.dispatch(query, heterogeneous_enabled)


def release(placement: Placement, queues: QueueSet) -> None:
    queues.release(placement)


def detect_and_plan(
    fleet: Fleet,
    plan: QueuePlan,
    heterogeneous_requested: bool = True,
    log: DispatchDecisionLog | None = None,
) -> QueueSet:
    """Create queues for the device kinds present in ``fleet``.

    One kind only: a single queue and heterogeneous dispatch forced off.
    Both kinds without the heterogeneous option: accelerator queue only.
    Both kinds with it: accelerator first, CPU for overflow.
    """
    if fleet is None or len(fleet) == 0:
        raise NoDevices("no devices detected")
    fleet = validate_fleet(fleet)
    kinds = fleet.kinds
    if kinds == {DeviceKind.CPU}:
        return QueueSet(DeviceQueue(DeviceKind.CPU, plan.cpu_depth), None, False, log)
    primary = DeviceQueue(DeviceKind.ACCELERATOR, plan.accelerator_depth)
    if DeviceKind.CPU in kinds and heterogeneous_requested and plan.heterogeneous_enabled:
        return QueueSet(primary, DeviceQueue(DeviceKind.CPU, plan.cpu_depth), True, log)
    return QueueSet(primary, None, False, log)


@dataclass(frozen=True)
class AffinityPlan:
    """Recommended cores for CPU offload workers, highest index first."""

    cores: list[int]
    groups: list[list[int]] = field(default_factory=list)
    reserved: list[int] = field(default_factory=list)

    def cpu_list(self) -> str:
        """Comma-separated ``hi-lo`` ranges, one per NUMA group."""
        return ",".join(f"{g[-1]}-{g[0]}" if len(g) > 1 else str(g[0]) for g in self.groups)


def recommend_affinity(total_cores: int, numa_count: int, reserve_fraction: float = 0.25) -> AffinityPlan:
    """Pick offload cores in reversed index order without crossing NUMA nodes.

    The lowest ``floor(reserve_fraction * total_cores)`` cores stay with the
    serving framework and the accelerator feeder; the rest are returned
    grouped by NUMA node, highest node first.
    """
    if total_cores < 1 or numa_count < 1:
        raise InvalidTopology("core and NUMA counts must be positive")
    if total_cores % numa_count:
        raise InvalidTopology(f"{total_cores} cores do not split evenly over {numa_count} NUMA nodes")
    if not 0 <= reserve_fraction < 1:
        raise InvalidTopology(f"reserve_fraction must be in [0, 1), got {reserve_fraction}")
    reserve = int(reserve_fraction * total_cores)
    if reserve >= total_cores:
        raise InvalidTopology("no cores left after reservation")

    per_node = total_cores // numa_count
    groups = []
    for node in reversed(range(numa_count)):
        lo = max(node * per_node, reserve)
        hi = (node + 1) * per_node - 1
        if hi >= lo:
            groups.append(list(range(hi, lo - 1, -1)))
    cores = [c for g in groups for c in g]
    return AffinityPlan(cores, groups, list(range(reserve)))
