import math
from dataclasses import replace
from typing import Mapping, Optional, Tuple

import numpy as np

from fusesim.calibration import Calibration
from fusesim.models import ComponentPower, FreqConfig, PhaseSpec, ProfileEntry
from fusesim.profiler import evaluate
from fusesim.search import Evaluator


def make_entry(
    f_cpu: Optional[int], f_gpu: Optional[int], latency: float, energy: float, f_mem: Optional[int] = None
) -> ProfileEntry:
    return ProfileEntry(
        cfg=FreqConfig(f_cpu, f_gpu, f_mem),
        phase=PhaseSpec.decode(32),
        latency=latency,
        energy_per_token=energy,
        avg_power=1000.0 * energy / latency,
    )


class LadderEvaluator:
    """
    Synthetic measurements: ``ladder`` maps GPU MHz to (latency, energy) with the CPU under EAS;
    pinning the CPU at ``slow_cpu`` stretches latency and trims energy.
    """

    def __init__(
        self,
        ladder: Mapping[int, Tuple[float, float]],
        fast_cpu: int = 2000,
        slow_cpu: int = 1000,
        slow_latency: float = 1.1,
        slow_energy: float = -4.0,
    ) -> None:
        self.ladder = dict(ladder)
        self.fast_cpu = fast_cpu
        self.slow_cpu = slow_cpu
        self.slow_latency = slow_latency
        self.slow_energy = slow_energy
        self.calls = 0

    def __call__(self, f_cpu: Optional[int], f_gpu: int) -> ProfileEntry:
        self.calls += 1
        latency, energy = self.ladder[f_gpu]
        if f_cpu == self.slow_cpu:
            latency, energy = latency * self.slow_latency, energy + self.slow_energy
        return make_entry(f_cpu, f_gpu, latency, energy)


def pinned_evaluator(calib: Calibration, phase: PhaseSpec, f_mem: int = 1352) -> Evaluator:
    """Closed-form measurements with memory pinned and the highest CPU frequency standing in for EAS."""
    stand_in = calib.table.max("cpu")

    def _evaluate(f_cpu: Optional[int], f_gpu: int) -> ProfileEntry:
        entry = evaluate(calib, FreqConfig(f_cpu or stand_in, f_gpu, f_mem), phase)
        return replace(entry, cfg=FreqConfig(f_cpu, f_gpu, None))

    return _evaluate


def _jitter(rng: np.random.Generator, value: float, spread: float = 0.7) -> float:
    return value * math.exp(rng.uniform(-spread, spread))


def random_calibration(base: Calibration, seed: int) -> Calibration:
    """``base`` with its decode work and power coefficients scattered by up to a factor of two."""
    rng = np.random.default_rng(seed)
    decode = base.perf.decode
    decode = replace(
        decode,
        w_c=_jitter(rng, decode.w_c),
        w_g=_jitter(rng, decode.w_g),
        b_m=_jitter(rng, decode.b_m),
        g0=_jitter(rng, decode.g0),
        issue_overlap=float(rng.uniform(0.0, 0.8)),
    )

    def _power(part: ComponentPower) -> ComponentPower:
        return ComponentPower(_jitter(rng, part.a), _jitter(rng, part.b), part.exponent)

    power = replace(base.power, cpu=_power(base.power.cpu), gpu=_power(base.power.gpu), mem=_power(base.power.mem))
    return replace(base, perf=replace(base.perf, decode=decode), power=power, calib_hash="")

