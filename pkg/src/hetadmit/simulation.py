"""Deterministic discrete-event simulator for the CPU/accelerator serving system.

Devices follow the affine latency line: a batch admitted when a device's
in-flight count becomes ``C`` takes ``alpha * C + beta`` seconds (plus
optional Gaussian jitter). Time is virtual, so hours of traffic replay in
milliseconds.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

from .calibration import ProfilingSample
from .dispatch import DispatchDecisionLog, detect_and_plan
from .domain import (
    DeviceKind,
    DeviceProfile,
    Fleet,
    LatencyModel,
    Placement,
    Query,
    QueuePlan,
    SimMetrics,
    Slo,
    validate_fleet,
)
from .errors import ConfigError

DEFAULT_QUERY_LENGTH = 75
OUTLIER_FACTOR = 3.0


class SimulatedDevice:
    """A synthetic worker pool whose latency follows its profile's line.

    ``worker_count`` workers share the in-flight queries, so latency is
    priced at ``ceil(in_flight / worker_count)``.
    """

    def __init__(self, profile: DeviceProfile, rng_seed: int | np.random.SeedSequence = 0,
                 outlier_fraction: float = 0.0):
        if not 0.0 <= outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        self.profile = profile
        self.rng_seed = rng_seed
        self.outlier_fraction = outlier_fraction
        self._rng = np.random.default_rng(rng_seed)

    @classmethod
    def from_params(cls, alpha: float, beta: float, noise_stddev: float = 0.0, seed: int = 0,
                    kind: DeviceKind = DeviceKind.ACCELERATOR, name: str = "device") -> "SimulatedDevice":
        return cls(DeviceProfile(name, kind, LatencyModel(alpha, beta), noise_stddev=noise_stddev), seed)

    def batch_latency(self, concurrency: int) -> float:
        per_worker = math.ceil(concurrency / self.profile.worker_count)
        latency = self.profile.latency.predict(per_worker)
        if self.profile.noise_stddev > 0:
            latency += self._rng.normal(0.0, self.profile.noise_stddev)
        if self.outlier_fraction > 0 and self._rng.random() < self.outlier_fraction:
            latency *= OUTLIER_FACTOR
        return max(latency, 0.0)

    def measure(self, concurrency: int) -> float:
        """Mean latency of one closed-loop batch of ``concurrency`` queries on an idle device."""
        if concurrency < 1:
            raise ValueError(f"concurrency must be >= 1, got {concurrency}")
        return self.batch_latency(concurrency)


def measure_latency_curve(device: SimulatedDevice, concurrencies: Iterable[int]) -> list[ProfilingSample]:
    return [ProfilingSample(int(c), device.measure(int(c))) for c in concurrencies]


def scale_for_cores(model: LatencyModel, cores: int, reference_cores: int, knee: int | None = None) -> LatencyModel:
    """CPU latency line for a different core count.

    ``alpha`` scales inversely with the usable cores; cores beyond ``knee``
    add nothing because host memory bandwidth saturates first.
    """
    if cores < 1 or reference_cores < 1:
        raise ValueError("core counts must be positive")
    usable = cores if knee is None else min(cores, knee)
    reference = reference_cores if knee is None else min(reference_cores, knee)
    return LatencyModel(model.alpha * reference / usable, model.beta)


@dataclass(frozen=True)
class ClosedLoop:
    """``concurrency`` clients that each resend once their response returns.

    The run ends after ``concurrency * batches`` queries have been admitted.
    A client refused as busy retries at the next completion instant.
    """

    concurrency: int
    batches: int = 1

    def __post_init__(self) -> None:
        if self.concurrency < 1:
            raise ConfigError("closed-loop concurrency must be >= 1")
        if self.batches < 1:
            raise ConfigError("closed-loop batches must be >= 1")


@dataclass(frozen=True)
class DiurnalOpenLoop:
    """Open-loop Poisson arrivals whose rate rises to ``peak_rate`` in peak hours.

    ``peak_hours`` are hour-of-day indices. Outside them the rate is
    ``base_rate`` except for half-cosine ramps of ``ramp_hours`` on either
    side of each peak. ``hour_length`` compresses the day for desk runs.
    """

    base_rate: float
    peak_rate: float
    peak_hours: tuple[int, ...] = ()
    duration: float = 86400.0
    hour_length: float = 3600.0
    ramp_hours: float = 0.25

    def __post_init__(self) -> None:
        if self.base_rate < 0 or self.peak_rate < 0:
            raise ConfigError("arrival rates must be >= 0")
        if self.duration < 0 or self.hour_length <= 0 or self.ramp_hours < 0:
            raise ConfigError("duration, hour_length and ramp_hours must be non-negative")
        object.__setattr__(self, "peak_hours", tuple(int(h) % 24 for h in self.peak_hours))

    def rate(self, t: np.ndarray | float) -> np.ndarray:
        hour = np.mod(np.asarray(t, dtype=float) / self.hour_length, 24.0)
        weight = np.zeros_like(hour)
        for p in self.peak_hours:
            # cyclic distance from the hour position to the interval [p, p + 1)
            before = np.mod(p - hour, 24.0)
            after = np.mod(hour - (p + 1), 24.0)
            inside = np.mod(hour - p, 24.0) < 1.0
            dist = np.where(inside, 0.0, np.minimum(before, after))
            if self.ramp_hours > 0:
                ramp = np.where(dist < self.ramp_hours, 0.5 * (1 + np.cos(np.pi * dist / self.ramp_hours)), 0.0)
            else:
                ramp = np.zeros_like(dist)
            weight = np.maximum(weight, np.where(inside, 1.0, ramp))
        return self.base_rate + (self.peak_rate - self.base_rate) * weight


WorkloadMode = Union[ClosedLoop, DiurnalOpenLoop]


@dataclass(frozen=True)
class WorkloadSpec:
    mode: WorkloadMode
    query_length: int = DEFAULT_QUERY_LENGTH
    seed: int = 0

    def __post_init__(self) -> None:
        if self.query_length < 1:
            raise ConfigError("query_length must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"query_length": self.query_length, "seed": self.seed}
        if isinstance(self.mode, ClosedLoop):
            out.update(mode="closed_loop", concurrency=self.mode.concurrency, batches=self.mode.batches)
        else:
            m = self.mode
            out.update(mode="diurnal", base_rate=m.base_rate, peak_rate=m.peak_rate,
                       peak_hours=list(m.peak_hours), duration=m.duration,
                       hour_length=m.hour_length, ramp_hours=m.ramp_hours)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WorkloadSpec":
        data = dict(data.get("workload", data))
        kind = data.get("mode")
        try:
            if kind == "closed_loop":
                mode: WorkloadMode = ClosedLoop(int(data["concurrency"]), int(data.get("batches", 1)))
            elif kind == "diurnal":
                mode = DiurnalOpenLoop(
                    float(data["base_rate"]), float(data["peak_rate"]),
                    tuple(data.get("peak_hours", ())), float(data["duration"]),
                    float(data.get("hour_length", 3600.0)), float(data.get("ramp_hours", 0.25)),
                )
            else:
                raise ConfigError(f"unknown workload mode {kind!r}; expected 'closed_loop' or 'diurnal'")
        except KeyError as exc:
            raise ConfigError(f"workload missing field {exc}") from None
        return cls(mode, int(data.get("query_length", DEFAULT_QUERY_LENGTH)), int(data.get("seed", 0)))


def generate_diurnal(spec: WorkloadSpec | DiurnalOpenLoop, seed: int | None = None) -> np.ndarray:
    """Sorted arrival times from a thinned homogeneous Poisson process."""
    if isinstance(spec, WorkloadSpec):
        mode, seed = spec.mode, spec.seed if seed is None else seed
    else:
        mode = spec
    if not isinstance(mode, DiurnalOpenLoop):
        raise ConfigError("generate_diurnal needs a diurnal open-loop workload")
    rng = np.random.default_rng(0 if seed is None else seed)
    top = max(mode.base_rate, mode.peak_rate)
    if mode.duration == 0 or top == 0:
        return np.empty(0)
    n = rng.poisson(top * mode.duration)
    times = np.sort(rng.uniform(0.0, mode.duration, size=n))
    keep = rng.uniform(0.0, top, size=n) < mode.rate(times)
    return times[keep]


@dataclass
class _Batch:
    kind: DeviceKind
    queries: list[tuple[int, int]]  # (query id, client id or -1)
    latency: float


@dataclass
class _RunState:
    latencies: list[float] = field(default_factory=list)
    accepted: int = 0
    busy: int = 0
    violations: int = 0
    completed: int = 0
    last_completion: float = 0.0
    max_in_flight: dict[str, int] = field(default_factory=dict)
    by_device: dict[str, int] = field(default_factory=dict)


def _device_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def simulate(
    fleet: Fleet | Sequence[DeviceProfile],
    plan: QueuePlan,
    workload: WorkloadSpec,
    slo: Slo,
    outlier_fraction: float = 0.0,
) -> SimMetrics:
    """Run ``workload`` through the dispatcher and simulated devices.

    Events at one instant are handled as a scheduling tick: completions
    release their slots first, then the tick's submissions are dispatched
    in order, and each device prices its new batch at its post-admission
    in-flight count.
    """
    fleet = validate_fleet(fleet)
    queues = detect_and_plan(fleet, plan, plan.heterogeneous_enabled, DispatchDecisionLog(keep=False))
    seeds = _device_seeds(workload.seed, 2)
    devices: dict[DeviceKind, SimulatedDevice] = {}
    for i, kind in enumerate((DeviceKind.ACCELERATOR, DeviceKind.CPU)):
        profile = fleet.primary(kind)
        if profile is not None and queues.queue(kind) is not None:
            devices[kind] = SimulatedDevice(profile, seeds[i], outlier_fraction)

    state = _RunState(max_in_flight={k.value: 0 for k in devices}, by_device={k.value: 0 for k in devices})
    heap: list[tuple[float, int, _Batch]] = []
    seq = 0
    next_id = 0
    t_max = slo.max_latency

    closed = workload.mode if isinstance(workload.mode, ClosedLoop) else None
    budget = closed.concurrency * closed.batches if closed else 0
    waiting: list[int] = []  # closed-loop clients refused as busy

    if closed:
        arrivals: list[float] = []
        pending_clients: list[int] = list(range(closed.concurrency))
    else:
        arrivals = list(generate_diurnal(workload))
        pending_clients = []
    arrival_idx = 0

    def tick(t: float, submissions: list[int]) -> None:
        nonlocal seq, next_id
        admitted: dict[DeviceKind, list[tuple[int, int]]] = {}
        for client in submissions:
            if closed and state.accepted >= budget:
                break
            qid = next_id
            next_id += 1
            placement = queues.dispatch(Query(qid, workload.query_length, t))
            if placement is Placement.BUSY:
                state.busy += 1
                if closed:
                    waiting.append(client)
                continue
            state.accepted += 1
            state.by_device[placement.value] += 1
            admitted.setdefault(placement.kind, []).append((qid, client))
        for kind, queries in admitted.items():
            in_flight = queues.queue(kind).current_length
            state.max_in_flight[kind.value] = max(state.max_in_flight[kind.value], in_flight)
            latency = devices[kind].batch_latency(in_flight)
            heapq.heappush(heap, (t + latency, seq, _Batch(kind, queries, latency)))
            seq += 1

    if closed:
        tick(0.0, pending_clients)
    while heap or arrival_idx < len(arrivals):
        next_completion = heap[0][0] if heap else math.inf
        next_arrival = arrivals[arrival_idx] if arrival_idx < len(arrivals) else math.inf
        t = min(next_completion, next_arrival)

        freed: list[int] = []
        while heap and heap[0][0] == t:
            _, _, batch = heapq.heappop(heap)
            placement = Placement.for_kind(batch.kind)
            for _qid, client in batch.queries:
                queues.release(placement)
                state.latencies.append(batch.latency)
                state.completed += 1
                if batch.latency > t_max:
                    state.violations += 1
                freed.append(client)
            state.last_completion = t

        if closed:
            if freed:
                submissions = waiting + freed
                waiting.clear()
                tick(t, submissions)
        else:
            count = 0
            while arrival_idx < len(arrivals) and arrivals[arrival_idx] == t:
                arrival_idx += 1
                count += 1
            if count:
                tick(t, [-1] * count)

    lat = np.asarray(state.latencies, dtype=float)
    start = 0.0 if closed else (float(arrivals[0]) if arrivals else 0.0)
    duration = state.last_completion - start if state.completed else 0.0
    return SimMetrics(
        accepted=state.accepted,
        rejected_busy=state.busy,
        slo_violations=state.violations,
        max_observed_concurrency=state.max_in_flight,
        latency_p50=float(np.percentile(lat, 50)) if lat.size else 0.0,
        latency_p99=float(np.percentile(lat, 99)) if lat.size else 0.0,
        latency_max=float(lat.max()) if lat.size else 0.0,
        throughput=state.completed / duration if duration > 0 else 0.0,
        submitted=state.accepted + state.busy,
        completed=state.completed,
        accepted_by_device=state.by_device,
        duration=duration,
    )
