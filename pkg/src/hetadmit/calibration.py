"""Latency/concurrency calibration and queue-depth estimation.

The processing latency of a device grows linearly with the number of
queries it handles at once. Fitting that line from a handful of profiling
runs gives the largest concurrency that still meets a latency SLO, which
becomes the device's queue depth.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .domain import DeviceKind, Fleet, LatencyModel, QueuePlan, Slo, validate_fleet
from .errors import (
    ConfigError,
    DegenerateSamples,
    DeviceInfeasible,
    InsufficientSamples,
    NoFeasiblePlan,
)

logger = logging.getLogger(__name__)

DEFAULT_CONCURRENCY_CAP = 4096
DEFAULT_PROFILING_POINTS = 6
PILOT_CONCURRENCIES = (1, 8)


@dataclass(frozen=True)
class ProfilingSample:
    concurrency: int
    observed_latency: float

    def __post_init__(self) -> None:
        if self.concurrency < 1:
            raise ValueError(f"concurrency must be >= 1, got {self.concurrency}")
        if not self.observed_latency > 0:
            raise ValueError(f"observed_latency must be > 0, got {self.observed_latency}")


@dataclass(frozen=True)
class FitResult:
    model: LatencyModel
    r_squared: float
    sample_count: int
    alpha_stderr: float = 0.0
    clamped: bool = False

    def __post_init__(self) -> None:
        if self.sample_count < 2:
            raise InsufficientSamples("a fit needs at least two samples")
        if not 0.0 <= self.r_squared <= 1.0:
            raise ValueError(f"r_squared out of range: {self.r_squared}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.model.alpha,
            "beta": self.model.beta,
            "r_squared": self.r_squared,
            "n": self.sample_count,
            "alpha_stderr": self.alpha_stderr,
            "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FitResult":
        return cls(
            LatencyModel(float(data["alpha"]), float(data["beta"])),
            float(data["r_squared"]),
            int(data["n"]),
            float(data.get("alpha_stderr", 0.0)),
            bool(data.get("clamped", False)),
        )


class LatencyCurveRegressor(RegressorMixin, BaseEstimator):
    """Least-squares fit of ``latency = alpha * concurrency + beta``.

    Coefficients are constrained to be non-negative: when the unconstrained
    solution has a negative slope or intercept, that coefficient is pinned
    at zero and the other one is refit, and ``clamped_`` is set.

    Parameters
    ----------
    clamp : bool, default=True
        Enforce ``alpha_ >= 0`` and ``beta_ >= 0``.

    Attributes
    ----------
    alpha_, beta_ : float
        Fitted slope (seconds per concurrent query) and intercept (seconds).
    alpha_stderr_ : float
        Standard error of the unconstrained slope; 0 with two samples.
    r_squared_ : float
        Coefficient of determination of the returned line, clipped to [0, 1].
    clamped_ : bool
    n_samples_ : int
    """

    def __init__(self, clamp: bool = True):
        self.clamp = clamp

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=1, y_numeric=True)
        if X.shape[1] != 1:
            raise ValueError(f"expected a single concurrency column, got {X.shape[1]}")
        x = X[:, 0].astype(float)
        y = y.astype(float)
        n = x.size
        if n < 2:
            raise InsufficientSamples(f"need at least 2 samples, got {n}")
        if np.ptp(x) == 0:
            raise DegenerateSamples("all samples share one concurrency value")

        x_mean = x.mean()
        y_mean = y.mean()
        dx = x - x_mean
        sxx = float(dx @ dx)
        slope = float(dx @ (y - y_mean)) / sxx
        intercept = y_mean - slope * x_mean

        residuals = y - (slope * x + intercept)
        ssr = float(residuals @ residuals)
        self.alpha_stderr_ = math.sqrt(ssr / (n - 2) / sxx) if n > 2 else 0.0

        self.clamped_ = False
        if self.clamp and (slope < 0 or intercept < 0):
            self.clamped_ = True
            if slope < 0:
                slope, intercept = 0.0, max(y_mean, 0.0)
            else:
                # through the origin
                slope, intercept = max(float(x @ y) / float(x @ x), 0.0), 0.0
            logger.warning("negative fitted coefficient clamped to 0 (alpha=%g, beta=%g)", slope, intercept)

        self.alpha_ = float(slope)
        self.beta_ = float(intercept)
        self.n_samples_ = n
        self.n_features_in_ = 1

        residuals = y - (slope * x + intercept)
        ssr = float(residuals @ residuals)
        sst = float((y - y_mean) @ (y - y_mean))
        if sst == 0.0:
            r2 = 1.0 if ssr <= 1e-24 * max(1.0, float(y @ y)) else 0.0
        else:
            r2 = 1.0 - ssr / sst
        self.r_squared_ = min(max(r2, 0.0), 1.0)
        return self

    def predict(self, X):
        check_is_fitted(self, ("alpha_", "beta_"))
        X = check_array(X)
        return self.alpha_ * X[:, 0] + self.beta_

    @property
    def model_(self) -> LatencyModel:
        check_is_fitted(self, ("alpha_", "beta_"))
        return LatencyModel(self.alpha_, self.beta_)

    def max_concurrency(self, slo: Slo | float, cap: int = DEFAULT_CONCURRENCY_CAP) -> int:
        return estimate_max_concurrency(self.model_, slo, cap=cap)


def fit_latency_model(samples: Sequence[ProfilingSample]) -> FitResult:
    samples = list(samples)
    if len(samples) < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {len(samples)}")
    X = np.array([[s.concurrency] for s in samples], dtype=float)
    y = np.array([s.observed_latency for s in samples], dtype=float)
    reg = LatencyCurveRegressor().fit(X, y)
    return FitResult(reg.model_, reg.r_squared_, reg.n_samples_, reg.alpha_stderr_, reg.clamped_)


class Depth(int):
    """An integer queue depth that remembers whether it hit the safety cap."""

    unbounded: bool

    def __new__(cls, value: int, unbounded: bool = False):
        obj = super().__new__(cls, value)
        obj.unbounded = unbounded
        return obj


def _slo_seconds(slo: Slo | float) -> float:
    return slo.max_latency if isinstance(slo, Slo) else float(slo)


def estimate_max_concurrency(
    model: LatencyModel, slo: Slo | float, cap: int = DEFAULT_CONCURRENCY_CAP
) -> Depth:
    """Largest ``C`` with ``predict(C) <= T`` and ``predict(C + 1) > T``.

    Returns 0 when a single query already breaks the SLO. A flat line
    (``alpha == 0``) that fits under the SLO never crosses it, so the
    result is ``cap`` with ``unbounded`` set.
    """
    t = _slo_seconds(slo)
    if model.predict(1) > t:
        return Depth(0)
    if model.alpha == 0:
        logger.warning("latency is flat in concurrency; capping depth at %d", cap)
        return Depth(cap, unbounded=True)

    ratio = (t - model.beta) / model.alpha
    if ratio > cap + 1:
        return Depth(cap, unbounded=True)
    c = int(math.floor(ratio))
    # the division can land one off the boundary in floating point
    while model.predict(c + 1) <= t:
        c += 1
    while c > 0 and model.predict(c) > t:
        c -= 1
    if c > cap:
        return Depth(cap, unbounded=True)
    return Depth(c)


def continuous_concurrency(model: LatencyModel, slo: Slo | float) -> float:
    """Real-valued concurrency at which the latency line meets the SLO."""
    t = _slo_seconds(slo)
    if model.alpha == 0:
        return math.inf if model.beta <= t else 0.0
    return (t - model.beta) / model.alpha


class LatencyProbe(Protocol):
    def measure(self, concurrency: int) -> float:
        """Latency in seconds of one closed-loop batch at ``concurrency``."""


def run_stress_test(
    device: LatencyProbe,
    slo: Slo | float,
    step: int,
    max_concurrency: int = DEFAULT_CONCURRENCY_CAP,
) -> int:
    """Raise concurrency in multiples of ``step`` until the SLO breaks.

    Returns the last passing multiple of ``step``. A coarse step can skip
    past the true maximum, so the result may under-report by up to
    ``step - 1``.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    t = _slo_seconds(slo)
    last_ok = 0
    c = step
    while c <= max_concurrency:
        if device.measure(c) > t:
            break
        last_ok = c
        c += step
    else:
        logger.warning("stress test reached the probe cap of %d without breaking the SLO", max_concurrency)
    if last_ok == 0:
        raise DeviceInfeasible(f"SLO of {t}s missed already at concurrency {step}")
    return last_ok


def profiling_schedule(
    model: LatencyModel, slo: Slo | float, points: int = DEFAULT_PROFILING_POINTS,
    cap: int = DEFAULT_CONCURRENCY_CAP,
) -> list[int]:
    """Geometric concurrency grid from 1 to twice the predicted maximum."""
    t = _slo_seconds(slo)
    if model.alpha > 0 and t > model.beta:
        upper = 2.0 * (t - model.beta) / model.alpha
    else:
        upper = 64.0
    upper = min(max(upper, 2.0), float(cap))
    grid = np.unique(np.rint(np.geomspace(1.0, upper, points)).astype(int))
    return [int(c) for c in grid if c >= 1]


def calibrate_device(
    device: LatencyProbe,
    slo: Slo | float,
    points: int = DEFAULT_PROFILING_POINTS,
    pilot: Sequence[int] = PILOT_CONCURRENCIES,
) -> FitResult:
    """Two-point pilot fit, then a geometric profiling sweep, then a final fit."""
    samples = [ProfilingSample(c, device.measure(c)) for c in pilot]
    pilot_fit = fit_latency_model(samples)
    for c in profiling_schedule(pilot_fit.model, slo, points):
        samples.append(ProfilingSample(c, device.measure(c)))
    return fit_latency_model(samples)


def load_profile_csv(path: str | Path) -> list[ProfilingSample]:
    """Read ``concurrency,latency_s`` rows."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"concurrency", "latency_s"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected header 'concurrency,latency_s'")
        try:
            return [
                ProfilingSample(int(row["concurrency"]), float(row["latency_s"])) for row in reader
            ]
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def write_profile_csv(path: str | Path, samples: Iterable[ProfilingSample]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["concurrency", "latency_s"])
        for s in samples:
            writer.writerow([s.concurrency, repr(s.observed_latency)])


@dataclass(frozen=True)
class CollaborationOverhead:
    """Latency adjustments applied while CPU and accelerator run together.

    Scales multiply ``alpha``; shifts are added to ``beta`` (seconds).
    """

    accelerator_alpha_scale: float = 1.0
    accelerator_beta_shift: float = 0.0
    cpu_alpha_scale: float = 1.0
    cpu_beta_shift: float = 0.0

    def apply(self, fleet: Fleet) -> Fleet:
        profiles = []
        for p in fleet.profiles:
            if p.kind is DeviceKind.ACCELERATOR:
                latency = p.latency.scaled(self.accelerator_alpha_scale, self.accelerator_beta_shift)
            else:
                latency = p.latency.scaled(self.cpu_alpha_scale, self.cpu_beta_shift)
            profiles.append(replace(p, latency=latency))
        return validate_fleet(profiles)


def fine_tune_depths(
    initial: QueuePlan,
    fleet: Fleet,
    slo: Slo,
    search_radius: int,
    overhead: CollaborationOverhead | None = None,
    batches: int = 3,
    seed: int = 0,
) -> QueuePlan:
    """Local grid search over queue depths using collaborative simulation.

    Every candidate ``(acc, cpu)`` within ``search_radius`` of the initial
    plan is run as a saturating closed loop of ``acc + cpu`` clients. The
    plan with the largest total depth and no SLO violations wins; ties go
    to the larger accelerator depth, then the smaller CPU depth.
    """
    from .simulation import ClosedLoop, WorkloadSpec, simulate

    if search_radius < 0:
        raise ValueError("search_radius must be >= 0")
    if search_radius == 0:
        return initial

    fleet = validate_fleet(fleet)
    collaborative = initial.heterogeneous_enabled and fleet.accelerator is not None and fleet.cpu is not None
    if overhead is not None and collaborative:
        fleet = overhead.apply(fleet)

    def span(center: int) -> range:
        return range(max(center - search_radius, 0), center + search_radius + 1)

    acc_range = span(initial.accelerator_depth)
    cpu_range = span(initial.cpu_depth) if initial.heterogeneous_enabled else range(0, 1)

    feasible: list[QueuePlan] = []
    for acc, cpu in itertools.product(acc_range, cpu_range):
        plan = QueuePlan(acc, cpu, initial.heterogeneous_enabled)
        workload = WorkloadSpec(ClosedLoop(concurrency=max(acc + cpu, 1), batches=batches), seed=seed)
        metrics = simulate(fleet, plan, workload, slo)
        if metrics.slo_violations == 0:
            feasible.append(plan)
    if not feasible:
        raise NoFeasiblePlan(f"no plan within radius {search_radius} of {initial} meets the SLO")
    return max(feasible, key=lambda p: (p.total, p.accelerator_depth, -p.cpu_depth))
