import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetadmit.calibration import estimate_max_concurrency, fit_latency_model
from hetadmit.domain import DeviceKind, DeviceProfile, LatencyModel, QueuePlan, Slo
from hetadmit.errors import ConfigError
from hetadmit.simulation import (
    ClosedLoop,
    DiurnalOpenLoop,
    SimulatedDevice,
    WorkloadSpec,
    generate_diurnal,
    measure_latency_curve,
    scale_for_cores,
    simulate,
)

from conftest import profile


def closed(k, batches=3, seed=0):
    return WorkloadSpec(ClosedLoop(k, batches), seed=seed)


def test_closed_loop_at_depth_meets_slo(v100):
    m = simulate([v100], QueuePlan(96, 0, False), closed(96), Slo(2))
    assert m.slo_violations == 0
    assert m.latency_max == pytest.approx(1.998, abs=1e-12)
    assert m.rejected_busy == 0


def test_one_busy_rejection_per_batch(v100):
    m = simulate([v100], QueuePlan(96, 0, False), closed(97, batches=3), Slo(2))
    assert m.rejected_busy == 3
    assert m.slo_violations == 0
    assert m.max_observed_concurrency == {"accelerator": 96}


def test_collaborative_plan_at_both_depths(v100, xeon):
    m = simulate([v100, xeon], QueuePlan(96, 20), closed(116), Slo(2))
    assert m.slo_violations == 0
    assert m.max_observed_concurrency == {"accelerator": 96, "cpu": 20}
    assert m.latency_max == pytest.approx(2.0)


def test_overflow_beyond_cpu_depth_violates(v100, xeon):
    m = simulate([v100, xeon], QueuePlan(96, 21), closed(117), Slo(2))
    assert m.slo_violations > 0


def test_accounting_invariant_holds_on_mixed_runs(v100, xeon):
    for k in (1, 50, 118, 200):
        m = simulate([v100, xeon], QueuePlan(96, 22), closed(k, 4, seed=k), Slo(2))
        assert m.accepted + m.rejected_busy == m.submitted
        assert m.slo_violations <= m.accepted
        assert m.completed == m.accepted == 4 * k


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(0, 20), st.integers(1, 4))
def test_closed_loop_occupancy(k, extra, batches):
    v100 = profile("v100")
    m = simulate([v100], QueuePlan(k + extra, 0, False), closed(k, batches), Slo(2))
    assert m.max_observed_concurrency["accelerator"] == k
    assert m.rejected_busy == 0


def test_simulation_is_deterministic():
    noisy = [profile("v100", noise=0.02), profile("xeon", noise=0.05)]
    a = simulate(noisy, QueuePlan(96, 22), closed(130, 20, seed=5), Slo(2))
    b = simulate(noisy, QueuePlan(96, 22), closed(130, 20, seed=5), Slo(2))
    c = simulate(noisy, QueuePlan(96, 22), closed(130, 20, seed=6), Slo(2))
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()


def test_measure_latency_curve():
    dev = SimulatedDevice.from_params(0.01, 0.3)
    samples = measure_latency_curve(dev, [10, 20])
    assert [(s.concurrency, s.observed_latency) for s in samples] == [(10, pytest.approx(0.4)), (20, pytest.approx(0.5))]
    flat = measure_latency_curve(SimulatedDevice.from_params(0, 0.5), [1])
    assert flat[0].observed_latency == 0.5


def test_measure_latency_curve_deterministic_with_noise():
    a = measure_latency_curve(SimulatedDevice.from_params(0.01, 0.3, 0.01, seed=11), range(1, 30, 3))
    b = measure_latency_curve(SimulatedDevice.from_params(0.01, 0.3, 0.01, seed=11), range(1, 30, 3))
    assert a == b
    assert any(abs(s.observed_latency - (0.01 * s.concurrency + 0.3)) > 1e-6 for s in a)


@given(st.floats(1e-4, 0.5), st.floats(0.01, 2.0))
def test_round_trip_calibration(alpha, beta):
    samples = measure_latency_curve(SimulatedDevice.from_params(alpha, beta), [1, 2, 4, 8, 16, 32])
    fit = fit_latency_model(samples)
    assert fit.model.alpha == pytest.approx(alpha, rel=1e-9)
    assert fit.model.beta == pytest.approx(beta, rel=1e-9)
    assert fit.r_squared == 1.0


def test_worker_count_spreads_in_flight_queries():
    p = DeviceProfile("cpu", DeviceKind.CPU, LatencyModel(0.1, 0.2), worker_count=4)
    assert SimulatedDevice(p).measure(8) == pytest.approx(0.1 * 2 + 0.2)
    assert SimulatedDevice(p).measure(9) == pytest.approx(0.1 * 3 + 0.2)


def test_outlier_injection():
    dev = SimulatedDevice(profile("kunpeng"), 3, outlier_fraction=0.2)
    lat = np.array([dev.measure(4) for _ in range(2000)])
    base = 0.073 * 4 + 0.85
    outliers = np.isclose(lat, 3 * base)
    assert np.all(outliers | np.isclose(lat, base))
    assert 0.15 < outliers.mean() < 0.25


def test_scale_for_cores():
    m = LatencyModel(0.084, 0.32)
    assert scale_for_cores(m, 24, 48).alpha == pytest.approx(0.168)
    assert scale_for_cores(m, 96, 48, knee=48).alpha == pytest.approx(0.084)
    assert scale_for_cores(m, 24, 48).beta == 0.32


def test_estimated_depths_are_tight():
    slo = Slo(1)
    for name in ("v100", "xeon", "atlas", "kunpeng"):
        p = profile(name)
        d = int(estimate_max_concurrency(p.latency, slo))
        plan = QueuePlan(d, 0, False) if p.kind is DeviceKind.ACCELERATOR else QueuePlan(0, d, True)
        bigger = QueuePlan(d + 1, 0, False) if p.kind is DeviceKind.ACCELERATOR else QueuePlan(0, d + 1, True)
        assert simulate([p], plan, closed(d), slo).slo_violations == 0
        assert simulate([p], bigger, closed(d + 1), slo).slo_violations >= 1


def test_diurnal_flat_rate_is_homogeneous_poisson():
    spec = DiurnalOpenLoop(base_rate=20, peak_rate=20, peak_hours=(3,), duration=500, hour_length=10)
    arrivals = generate_diurnal(spec, seed=4)
    expected = 20 * 500
    assert abs(arrivals.size - expected) <= 3 * math.sqrt(expected)
    assert np.all(np.diff(arrivals) >= 0)
    assert arrivals.min() >= 0 and arrivals.max() <= 500


def test_diurnal_empty_when_no_duration():
    assert generate_diurnal(DiurnalOpenLoop(5, 10, (1,), duration=0)).size == 0


def test_diurnal_peak_hours_double_the_rate():
    hour = 50.0
    spec = DiurnalOpenLoop(base_rate=10, peak_rate=20, peak_hours=(9, 18), duration=24 * hour, hour_length=hour)
    arrivals = generate_diurnal(WorkloadSpec(spec, seed=12))
    counts = np.bincount((arrivals // hour).astype(int), minlength=24)
    peak = counts[[9, 18]].mean()
    off = np.delete(counts, [9, 18]).mean()
    assert peak / off == pytest.approx(2.0, rel=0.10)


def test_diurnal_deterministic():
    spec = WorkloadSpec(DiurnalOpenLoop(5, 15, (2,), duration=100, hour_length=5), seed=9)
    np.testing.assert_array_equal(generate_diurnal(spec), generate_diurnal(spec))


def test_diurnal_rate_curve_shape():
    spec = DiurnalOpenLoop(10, 30, (5,), hour_length=1.0, ramp_hours=0.5)
    assert spec.rate(5.5) == pytest.approx(30)
    assert spec.rate(2.0) == pytest.approx(10)
    assert spec.rate(4.75) == pytest.approx(20)  # half-way up the ramp
    assert spec.rate(6.25) == pytest.approx(20)


def test_open_loop_simulation(v100, xeon):
    spec = WorkloadSpec(DiurnalOpenLoop(30, 90, (6,), duration=240, hour_length=10), seed=2)
    hetero = simulate([v100, xeon], QueuePlan(96, 20), spec, Slo(2))
    alone = simulate([v100, xeon], QueuePlan(96, 0, False), spec, Slo(2))
    assert hetero.submitted == alone.submitted == generate_diurnal(spec).size
    assert hetero.slo_violations == 0
    assert hetero.accepted >= alone.accepted
    assert hetero.accepted_by_device["cpu"] > 0


def test_workload_spec_roundtrip():
    for spec in (
        closed(12, 4, seed=3),
        WorkloadSpec(DiurnalOpenLoop(1.5, 4.0, (9, 18), 600.0, 25.0, 0.5), 128, 7),
    ):
        assert WorkloadSpec.from_dict(spec.to_dict()) == spec
    assert WorkloadSpec.from_dict({"workload": {"mode": "closed_loop", "concurrency": 4}}).mode == ClosedLoop(4, 1)
    with pytest.raises(ConfigError):
        WorkloadSpec.from_dict({"mode": "bursty"})
    with pytest.raises(ConfigError):
        ClosedLoop(0)
