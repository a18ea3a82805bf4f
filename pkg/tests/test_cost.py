import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetadmit.cost import (
    cost_average_strategy,
    cost_peak_strategy,
    cost_report,
    format_pct,
    offload_gains,
    peak_queries,
    waiting_slots,
)
from hetadmit.domain import CostInputs, Slo
from hetadmit.errors import InfeasibleProcessing, ZeroConcurrency, ZeroThroughput


def inputs(**kw):
    base = dict(
        queries_per_second=1000.0, peak_queries=1180.0, throughput=100.0, max_concurrency=118,
        devices_per_instance=1, price_per_device=10.0, slo=Slo(2.0), mean_processing=0.5,
    )
    base.update(kw)
    return CostInputs(**base)


def test_waiting_slots():
    assert waiting_slots(Slo(2), 0.5) == 3
    assert waiting_slots(Slo(1), 1) == 0
    with pytest.raises(InfeasibleProcessing):
        waiting_slots(Slo(1), 1.2)


def test_average_strategy():
    assert cost_average_strategy(inputs()) == pytest.approx(33.333333, rel=1e-6)
    assert cost_average_strategy(inputs(queries_per_second=0)) == 0
    with pytest.raises(InfeasibleProcessing):
        cost_average_strategy(inputs(slo=Slo(1), mean_processing=1))
    with pytest.raises(ZeroThroughput):
        cost_average_strategy(inputs(throughput=0))


def test_peak_strategy():
    assert cost_peak_strategy(inputs()) == pytest.approx(100.0)
    assert cost_peak_strategy(inputs(max_concurrency=236)) == pytest.approx(50.0)
    assert cost_peak_strategy(inputs(peak_queries=0)) == 0
    with pytest.raises(ZeroConcurrency):
        cost_peak_strategy(inputs(max_concurrency=0))


@given(st.integers(1, 10_000), st.integers(1, 10_000))
def test_peak_cost_strictly_decreasing_in_concurrency(c, extra):
    assert cost_peak_strategy(inputs(max_concurrency=c + extra)) < cost_peak_strategy(inputs(max_concurrency=c))


@given(st.floats(0.01, 1e4), st.integers(1, 64), st.floats(0.5, 8))
def test_average_cost_homogeneous_in_price_and_devices(price, devices, k):
    base = cost_average_strategy(inputs(price_per_device=price, devices_per_instance=devices))
    assert cost_average_strategy(inputs(price_per_device=price * k, devices_per_instance=devices)) == pytest.approx(base * k)
    assert cost_average_strategy(inputs(price_per_device=price, devices_per_instance=devices * 3)) == pytest.approx(base * 3)


@pytest.mark.parametrize(
    "c_cpu,c_accel,savings,gain",
    [(22, 96, "18.6%", "22.9%"), (0, 40, "0.0%", "0.0%"), (8, 44, "15.4%", "18.2%")],
)
def test_offload_gains(c_cpu, c_accel, savings, gain):
    s, g = offload_gains(c_cpu, c_accel)
    assert format_pct(s) == savings
    assert format_pct(g) == gain


@given(st.integers(0, 10_000), st.integers(1, 10_000))
def test_offload_gain_identities(c_cpu, c_accel):
    s, g = offload_gains(c_cpu, c_accel)
    assert s == pytest.approx(g / (1 + g))
    assert (s == 0 and g == 0) == (c_cpu == 0)


def test_offload_gains_guards():
    with pytest.raises(ZeroConcurrency):
        offload_gains(1, 0)
    with pytest.raises(ValueError):
        offload_gains(-1, 5)


def test_cost_report():
    r = cost_report(22, 96, inputs()).to_dict()
    assert r["waiting_slots"] == 3
    assert r["peak_strategy_cost"] == pytest.approx(100.0)
    assert r["peak_savings_pct"] == "18.6%"
    bare = cost_report(22, 96)
    assert bare.average_strategy_cost is None


def test_peak_queries_from_trace():
    trace = [0.1, 0.2, 0.3, 1.5, 2.1, 2.2]
    assert peak_queries(trace) == 3
    assert peak_queries([]) == 0
    assert peak_queries(trace, percentile=50) == 2
