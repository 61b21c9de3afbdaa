import pytest

from fusesim.engine import SimTrace, TraceRecord
from fusesim.metrics import e2e_latency, effective_frequency, energy_per_token, phase_metrics
from fusesim.models import PhaseResult, PhaseSpec


def _trace(*segments):
    records, t = [], 0.0
    for f_gpu, ms in segments:
        for _ in range(ms):
            records.append(TraceRecord(t, 2850, f_gpu, 3172, 0.2, 0.6, 0.2, 2000.0, 0, 1.0, "decode"))
            t += 1.0
    return SimTrace(records)


@pytest.mark.parametrize(
    "segments, expected",
    [
        ([(848, 100)], 848.0),
        ([(848, 50), (151, 50)], 499.5),
        ([(701, 75), (151, 25)], 563.5),
    ],
)
def test_effective_frequency(segments, expected):
    assert effective_frequency(_trace(*segments), "gpu") == pytest.approx(expected)


def test_effective_frequency_weights_partial_ticks():
    trace = _trace((848, 1))
    trace.records.append(TraceRecord(1.0, 2850, 151, 3172, 0.2, 0.6, 0.2, 2000.0, 1, 0.5, "decode"))
    assert effective_frequency(trace, "gpu") == pytest.approx((848 + 0.5 * 151) / 1.5)


def test_effective_frequency_of_empty_trace():
    with pytest.raises(ValueError):
        effective_frequency(SimTrace(), "gpu")


def test_energy_per_token():
    assert energy_per_token(2000.0, 200.0, PhaseSpec.decode(10)) == pytest.approx(400.0)
    assert energy_per_token(3000.0, 3200.0, PhaseSpec.prefill(32)) == pytest.approx(300.0)
    with pytest.raises(ValueError):
        energy_per_token(0.0, 200.0, PhaseSpec.decode(1))


@pytest.mark.parametrize("ttft, tpot, n_d, expected", [(10000, 200, 256, 61000), (750, 123, 1, 750), (0, 100, 11, 1000)])
def test_e2e_latency(ttft, tpot, n_d, expected):
    assert e2e_latency(ttft, tpot, n_d) == pytest.approx(expected)


def test_e2e_latency_needs_a_token():
    with pytest.raises(ValueError):
        e2e_latency(100, 10, 0)


def test_phase_metrics_use_steady_power():
    phase = PhaseSpec.decode(4)
    result = PhaseResult(
        phase=phase,
        duration=800.0,
        avg_power=2500.0,
        energy=2000.0,
        tokens=4,
        steady_power=2000.0,
        effective_freq={"cpu": 500.0, "gpu": 151.0, "mem": 421.0},
    )
    metrics = phase_metrics(result)
    assert metrics.latency == pytest.approx(200.0)
    assert metrics.avg_power == pytest.approx(2000.0)
    assert metrics.energy_per_token == pytest.approx(400.0)
    assert metrics.effective_freq["gpu"] == 151.0
