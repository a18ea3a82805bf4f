"""Shared value types for fleets, latency models, plans and run metrics.

Everything here is an immutable dataclass with validation in
``__post_init__`` and a ``to_dict``/``from_dict`` pair used for the JSON
reports and the TOML fleet config.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

import tomli
import tomli_w

from .errors import ConfigError, DuplicateName, EmptyFleet, NoDevices

logger = logging.getLogger(__name__)


class DeviceKind(str, enum.Enum):
    ACCELERATOR = "accelerator"
    CPU = "cpu"

    @property
    def priority(self) -> int:
        # lower sorts first; accelerators always win dispatch
        return 0 if self is DeviceKind.ACCELERATOR else 1


class Placement(str, enum.Enum):
    ACCELERATOR = "accelerator"
    CPU = "cpu"
    BUSY = "busy"

    @classmethod
    def for_kind(cls, kind: DeviceKind) -> "Placement":
        return cls(kind.value)

    @property
    def kind(self) -> DeviceKind | None:
        return None if self is Placement.BUSY else DeviceKind(self.value)


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ConfigError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class LatencyModel:
    """Affine processing latency ``alpha * C + beta`` in seconds."""

    alpha: float
    beta: float

    def __post_init__(self) -> None:
        _check_finite("alpha", self.alpha)
        _check_finite("beta", self.beta)
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be >= 0, got ({self.alpha}, {self.beta})")

    def predict(self, concurrency: float) -> float:
        return self.alpha * concurrency + self.beta

    def scaled(self, alpha_scale: float = 1.0, beta_shift: float = 0.0) -> "LatencyModel":
        return LatencyModel(self.alpha * alpha_scale, max(self.beta + beta_shift, 0.0))

    def to_dict(self) -> dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LatencyModel":
        return cls(float(data["alpha"]), float(data["beta"]))


@dataclass(frozen=True)
class DecomposedLatency:
    """Per-query compute and IO cost plus the concurrency-independent model cost."""

    compute_per_query: float
    io_per_query: float
    model_load_fixed: float

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            _check_finite(f.name, value)
            if value < 0:
                raise ConfigError(f"{f.name} must be >= 0, got {value}")

    def __add__(self, other: "DecomposedLatency") -> "DecomposedLatency":
        return DecomposedLatency(
            self.compute_per_query + other.compute_per_query,
            self.io_per_query + other.io_per_query,
            self.model_load_fixed + other.model_load_fixed,
        )

    def to_dict(self) -> dict[str, float]:
        return {
            "compute_per_query": self.compute_per_query,
            "io_per_query": self.io_per_query,
            "model_load_fixed": self.model_load_fixed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DecomposedLatency":
        return cls(
            float(data["compute_per_query"]),
            float(data["io_per_query"]),
            float(data["model_load_fixed"]),
        )


def decomposed_to_model(d: DecomposedLatency) -> LatencyModel:
    """Collapse a latency decomposition into the affine model it implies."""
    return LatencyModel(alpha=d.compute_per_query + d.io_per_query, beta=d.model_load_fixed)


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    kind: DeviceKind
    latency: LatencyModel
    worker_count: int = 1
    noise_stddev: float = 0.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("device name must be non-empty")
        if not isinstance(self.kind, DeviceKind):
            object.__setattr__(self, "kind", DeviceKind(self.kind))
        if int(self.worker_count) != self.worker_count or self.worker_count < 1:
            raise ConfigError(f"worker_count must be a positive integer, got {self.worker_count}")
        _check_finite("noise_stddev", self.noise_stddev)
        if self.noise_stddev < 0:
            raise ConfigError(f"noise_stddev must be >= 0, got {self.noise_stddev}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "alpha": self.latency.alpha,
            "beta": self.latency.beta,
            "worker_count": self.worker_count,
            "noise_stddev": self.noise_stddev,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DeviceProfile":
        try:
            return cls(
                name=str(data["name"]),
                kind=DeviceKind(data["kind"]),
                latency=LatencyModel(float(data["alpha"]), float(data["beta"])),
                worker_count=int(data.get("worker_count", 1)),
                noise_stddev=float(data.get("noise_stddev", 0.0)),
            )
        except KeyError as exc:
            raise ConfigError(f"device entry missing field {exc}") from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class Slo:
    max_latency: float

    def __post_init__(self) -> None:
        _check_finite("max_latency", self.max_latency)
        if self.max_latency <= 0:
            raise ConfigError(f"SLO max_latency must be > 0, got {self.max_latency}")

    def to_dict(self) -> dict[str, float]:
        return {"max_latency_s": self.max_latency}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Slo":
        return cls(float(data["max_latency_s"]))


@dataclass(frozen=True)
class QueuePlan:
    accelerator_depth: int
    cpu_depth: int
    heterogeneous_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("accelerator_depth", "cpu_depth"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {value}")
        if not self.heterogeneous_enabled and self.cpu_depth != 0:
            raise ConfigError("cpu_depth must be 0 when heterogeneous dispatch is disabled")

    @property
    def total(self) -> int:
        return self.accelerator_depth + self.cpu_depth

    def depth_for(self, kind: DeviceKind) -> int:
        return self.accelerator_depth if kind is DeviceKind.ACCELERATOR else self.cpu_depth

    def to_dict(self) -> dict[str, Any]:
        return {
            "accelerator_depth": self.accelerator_depth,
            "cpu_depth": self.cpu_depth,
            "heterogeneous": self.heterogeneous_enabled,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QueuePlan":
        return cls(
            int(data["accelerator_depth"]),
            int(data.get("cpu_depth", 0)),
            bool(data.get("heterogeneous", True)),
        )


@dataclass(frozen=True)
class Query:
    id: int | str
    token_length: int = 75
    arrival_time: float = 0.0

    def __post_init__(self) -> None:
        if self.token_length < 1:
            raise ConfigError(f"token_length must be >= 1, got {self.token_length}")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "token_length": self.token_length, "arrival_time": self.arrival_time}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Query":
        return cls(data["id"], int(data["token_length"]), float(data["arrival_time"]))


@dataclass(frozen=True)
class CostInputs:
    """Inputs of the average- and peak-sizing cost formulas.

    ``throughput`` is queries per second for one instance; ``slo`` and
    ``mean_processing`` determine how many queries can wait in front of a
    new one without timing out.
    """

    queries_per_second: float
    peak_queries: float
    throughput: float
    max_concurrency: int
    devices_per_instance: int
    price_per_device: float
    slo: Slo
    mean_processing: float

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name == "slo":
                continue
            value = getattr(self, f.name)
            _check_finite(f.name, value)
            if value < 0:
                raise ConfigError(f"{f.name} must be >= 0, got {value}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "slo"}
        out["slo"] = self.slo.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CostInputs":
        return cls(
            queries_per_second=float(data["queries_per_second"]),
            peak_queries=float(data["peak_queries"]),
            throughput=float(data["throughput"]),
            max_concurrency=int(data["max_concurrency"]),
            devices_per_instance=int(data["devices_per_instance"]),
            price_per_device=float(data["price_per_device"]),
            slo=Slo.from_dict(data["slo"]),
            mean_processing=float(data["mean_processing"]),
        )


@dataclass(frozen=True)
class SimMetrics:
    accepted: int
    rejected_busy: int
    slo_violations: int
    max_observed_concurrency: Mapping[str, int]
    latency_p50: float
    latency_p99: float
    latency_max: float
    throughput: float
    submitted: int
    completed: int
    accepted_by_device: Mapping[str, int] = field(default_factory=dict)
    duration: float = 0.0

    def __post_init__(self) -> None:
        if self.accepted + self.rejected_busy != self.submitted:
            raise ValueError(
                f"accounting mismatch: accepted {self.accepted} + busy {self.rejected_busy}"
                f" != submitted {self.submitted}"
            )
        if self.slo_violations > self.accepted:
            raise ValueError("slo_violations cannot exceed accepted")

    def to_dict(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "rejected_busy": self.rejected_busy,
            "slo_violations": self.slo_violations,
            "max_observed_concurrency": dict(sorted(self.max_observed_concurrency.items())),
            "latency_p50": self.latency_p50,
            "latency_p99": self.latency_p99,
            "latency_max": self.latency_max,
            "throughput": self.throughput,
            "submitted": self.submitted,
            "completed": self.completed,
            "accepted_by_device": dict(sorted(self.accepted_by_device.items())),
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimMetrics":
        return cls(
            accepted=int(data["accepted"]),
            rejected_busy=int(data["rejected_busy"]),
            slo_violations=int(data["slo_violations"]),
            max_observed_concurrency={k: int(v) for k, v in data["max_observed_concurrency"].items()},
            latency_p50=float(data["latency_p50"]),
            latency_p99=float(data["latency_p99"]),
            latency_max=float(data["latency_max"]),
            throughput=float(data["throughput"]),
            submitted=int(data["submitted"]),
            completed=int(data["completed"]),
            accepted_by_device={k: int(v) for k, v in data.get("accepted_by_device", {}).items()},
            duration=float(data.get("duration", 0.0)),
        )


@dataclass(frozen=True)
class Fleet:
    """A validated set of device profiles.

    ``accelerator`` is the priority device; ``cpu`` is the single CPU pool
    that receives overflow. Extra pools of the same kind are kept in
    ``profiles`` but are not dispatch targets.
    """

    profiles: tuple[DeviceProfile, ...]
    accelerator: DeviceProfile | None
    cpu: DeviceProfile | None

    @property
    def kinds(self) -> frozenset[DeviceKind]:
        return frozenset(p.kind for p in self.profiles)

    @property
    def offload_target(self) -> DeviceProfile | None:
        return self.cpu if self.accelerator is not None else None

    def primary(self, kind: DeviceKind) -> DeviceProfile | None:
        return self.accelerator if kind is DeviceKind.ACCELERATOR else self.cpu

    def __len__(self) -> int:
        return len(self.profiles)

    def __iter__(self):
        return iter(self.profiles)

    def to_dict(self) -> dict[str, Any]:
        return {"device": [p.to_dict() for p in self.profiles]}


def validate_fleet(profiles: Iterable[DeviceProfile]) -> Fleet:
    if isinstance(profiles, Fleet):
        return profiles
    profiles = tuple(profiles)
    if not profiles:
        raise EmptyFleet("fleet must contain at least one device profile")
    seen: set[str] = set()
    for p in profiles:
        if not isinstance(p, DeviceProfile):
            raise NoDevices(f"not a device profile: {p!r}")
        if p.name in seen:
            raise DuplicateName(f"duplicate device name {p.name!r}")
        seen.add(p.name)

    accelerators = [p for p in profiles if p.kind is DeviceKind.ACCELERATOR]
    cpus = [p for p in profiles if p.kind is DeviceKind.CPU]
    if len(cpus) > 1:
        logger.warning(
            "%d CPU pools configured; only %r is used for offload (one CPU instance per machine)",
            len(cpus),
            cpus[0].name,
        )
    return Fleet(profiles, accelerators[0] if accelerators else None, cpus[0] if cpus else None)


@dataclass(frozen=True)
class FleetConfig:
    """Parsed contents of a fleet config file."""

    fleet: Fleet
    slo: Slo | None = None
    plan: QueuePlan | None = None
    seed: int | None = None
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = self.fleet.to_dict()
        if self.slo is not None:
            out["slo"] = self.slo.to_dict()
        if self.plan is not None:
            out["plan"] = self.plan.to_dict()
        if self.seed is not None:
            out["seed"] = self.seed
        return out


def parse_config(data: Mapping[str, Any]) -> FleetConfig:
    devices = data.get("device")
    if not devices:
        raise EmptyFleet("config has no [[device]] entries")
    fleet = validate_fleet(DeviceProfile.from_dict(d) for d in devices)
    slo = Slo.from_dict(data["slo"]) if "slo" in data else None
    plan = None
    plan_data = data.get("plan")
    if isinstance(plan_data, Mapping):
        plan = QueuePlan.from_dict(plan_data)
    elif plan_data not in (None, "auto"):
        raise ConfigError(f"plan must be a table or 'auto', got {plan_data!r}")
    seed = data.get("seed")
    return FleetConfig(fleet, slo, plan, None if seed is None else int(seed), dict(data))


def load_config(path: str | Path) -> FleetConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(data)


def dump_config(config: FleetConfig) -> str:
    return tomli_w.dumps(config.to_dict())
