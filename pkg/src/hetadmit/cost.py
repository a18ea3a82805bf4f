"""Deployment cost under average-throughput and peak-concurrency sizing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .domain import CostInputs, Slo
from .errors import InfeasibleProcessing, ZeroConcurrency, ZeroThroughput


@dataclass(frozen=True)
class CostReport:
    average_strategy_cost: float | None
    peak_strategy_cost: float | None
    waiting_slots: int | None
    peak_savings_ratio: float
    throughput_gain_ratio: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "average_strategy_cost": self.average_strategy_cost,
            "peak_strategy_cost": self.peak_strategy_cost,
            "waiting_slots": self.waiting_slots,
            "peak_savings_ratio": self.peak_savings_ratio,
            "throughput_gain_ratio": self.throughput_gain_ratio,
            "peak_savings_pct": format_pct(self.peak_savings_ratio),
            "throughput_gain_pct": format_pct(self.throughput_gain_ratio),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CostReport":
        return cls(
            data["average_strategy_cost"],
            data["peak_strategy_cost"],
            data["waiting_slots"],
            float(data["peak_savings_ratio"]),
            float(data["throughput_gain_ratio"]),
        )


def format_pct(ratio: float) -> str:
    return f"{ratio * 100:.1f}%"


def waiting_slots(slo: Slo, mean_processing: float) -> int:
    """How many other queries can be processed while one waits, without a timeout."""
    t = slo.max_latency
    if mean_processing <= 0:
        raise InfeasibleProcessing(f"mean processing time must be > 0, got {mean_processing}")
    if mean_processing > t:
        raise InfeasibleProcessing(f"processing time {mean_processing}s exceeds the {t}s SLO")
    return int(math.floor((t - mean_processing) / mean_processing))


def cost_average_strategy(inputs: CostInputs) -> float:
    n = waiting_slots(inputs.slo, inputs.mean_processing)
    if n < 1:
        raise InfeasibleProcessing("no waiting slot fits under the SLO; average sizing is undefined")
    if inputs.throughput <= 0:
        raise ZeroThroughput("throughput must be > 0")
    return (inputs.queries_per_second / n) / inputs.throughput * inputs.devices_per_instance * inputs.price_per_device


def cost_peak_strategy(inputs: CostInputs) -> float:
    if inputs.max_concurrency < 1:
        raise ZeroConcurrency("max_concurrency must be >= 1")
    return inputs.peak_queries / inputs.max_concurrency * inputs.devices_per_instance * inputs.price_per_device


def offload_gains(c_cpu: int, c_accel: int) -> tuple[float, float]:
    """``(peak_savings_ratio, throughput_gain_ratio)`` from adding CPU concurrency."""
    if c_accel < 1:
        raise ZeroConcurrency("accelerator concurrency must be >= 1")
    if c_cpu < 0:
        raise ValueError("CPU concurrency must be >= 0")
    return c_cpu / (c_cpu + c_accel), c_cpu / c_accel


def cost_report(c_cpu: int, c_accel: int, inputs: CostInputs | None = None) -> CostReport:
    savings, gain = offload_gains(c_cpu, c_accel)
    if inputs is None:
        return CostReport(None, None, None, savings, gain)
    return CostReport(
        cost_average_strategy(inputs),
        cost_peak_strategy(inputs),
        waiting_slots(inputs.slo, inputs.mean_processing),
        savings,
        gain,
    )


def peak_queries(arrivals: Sequence[float], window: float = 1.0, percentile: float = 100.0) -> float:
    """Percentile of per-window arrival counts over a trace."""
    if len(arrivals) == 0:
        return 0.0
    arr = np.asarray(arrivals, dtype=float)
    bins = np.floor((arr - arr.min()) / window).astype(int)
    counts = np.bincount(bins)
    return float(np.percentile(counts, percentile))
