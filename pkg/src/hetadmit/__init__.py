"""Admission control for CPU offloading of accelerator-served embedding queries."""

from .calibration import (
    CollaborationOverhead,
    FitResult,
    LatencyCurveRegressor,
    ProfilingSample,
    calibrate_device,
    estimate_max_concurrency,
    fine_tune_depths,
    fit_latency_model,
    run_stress_test,
)
from .cost import CostReport, cost_average_strategy, cost_peak_strategy, offload_gains, waiting_slots
from .dispatch import QueueSet, detect_and_plan, dispatch, recommend_affinity, release
from .domain import (
    CostInputs,
    DecomposedLatency,
    DeviceKind,
    DeviceProfile,
    Fleet,
    LatencyModel,
    Placement,
    Query,
    QueuePlan,
    SimMetrics,
    Slo,
    decomposed_to_model,
    load_config,
    validate_fleet,
)
from .simulation import (
    ClosedLoop,
    DiurnalOpenLoop,
    SimulatedDevice,
    WorkloadSpec,
    generate_diurnal,
    measure_latency_curve,
    simulate,
)

__version__ = "0.1.0"
