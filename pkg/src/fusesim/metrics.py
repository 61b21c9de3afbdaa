import math
from dataclasses import dataclass
from typing import Dict

from fusesim.engine import SimTrace
from fusesim.models import Component, PhaseResult, PhaseSpec


@dataclass(frozen=True)
class PhaseMetrics:
    """
    Metrics of one phase.

    Attributes
    ----------
    latency : float
        TTFT (prefill) or TPOT (decode) in ms.
    energy_per_token : float
        mJ per token.
    avg_power : float
        mW.
    effective_freq : Dict[str, float]
        Time-weighted average frequency per component, MHz.
    """

    latency: float
    energy_per_token: float
    avg_power: float
    effective_freq: Dict[str, float]


def effective_frequency(trace: SimTrace, component: Component) -> float:
    """Time-weighted mean of the frequencies a governor ran ``component`` at."""
    if not len(trace):
        msg = "Cannot compute an effective frequency from an empty trace."
        raise ValueError(msg)
    column = f"f_{component}"
    weighted = math.fsum(getattr(record, column) * record.dt for record in trace)
    return weighted / math.fsum(record.dt for record in trace)


def energy_per_token(avg_power: float, latency: float, phase: PhaseSpec) -> float:
    if avg_power <= 0 or latency <= 0:
        msg = f"Power and latency must be positive, got {avg_power} mW and {latency} ms."
        raise ValueError(msg)
    if phase.kind == "prefill":
        if phase.prompt_tokens <= 0:
            msg = "Prefill energy per token needs a positive prompt length."
            raise ValueError(msg)
        return avg_power * latency / phase.prompt_tokens / 1000.0
    return avg_power * latency / 1000.0


def e2e_latency(ttft: float, tpot: float, n_d: int) -> float:
    if n_d < 1:
        msg = f"A request decodes at least one token, got {n_d}."
        raise ValueError(msg)
    return ttft + (n_d - 1) * tpot


def phase_metrics(result: PhaseResult) -> PhaseMetrics:
    """Latency and energy-per-token of a phase, measured on its post-warm-up power."""
    power = result.steady_power or result.avg_power
    return PhaseMetrics(
        latency=result.latency,
        energy_per_token=energy_per_token(power, result.latency, result.phase),
        avg_power=power,
        effective_freq=dict(result.effective_freq),
    )
