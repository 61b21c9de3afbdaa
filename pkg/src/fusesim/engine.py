"""Fixed-timestep simulation of one inference phase under a set of governors."""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd
from typing_extensions import Literal

from fusesim.calibration import Calibration
from fusesim.exceptions import NonTermination
from fusesim.governors import GovernorSet, GovernorSpec
from fusesim.models import Component, FreqConfig, PhaseKind, PhaseParams, PhaseResult, PhaseSpec, UtilPoint
from fusesim.perf import component_power, steady_state

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "t_ms",
    "f_cpu",
    "f_gpu",
    "f_mem",
    "u_cpu",
    "u_gpu",
    "u_mem",
    "power_mw",
    "tokens_done",
    "dt_ms",
    "phase",
]

# slack when turning accumulated fractional kernels into whole tokens
_TOKEN_EPS = 1e-9


@dataclass(frozen=True)
class TraceRecord:
    t: float
    f_cpu: int
    f_gpu: int
    f_mem: int
    u_cpu: float
    u_gpu: float
    u_mem: float
    power: float
    tokens_done: int
    dt: float
    phase: PhaseKind


@dataclass
class SimTrace:
    """Per-tick record of a run; the last tick may be shorter than 1 ms."""

    records: List[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def column(self, name: str) -> List[float]:
        return [getattr(record, name) for record in self.records]

    @property
    def duration(self) -> float:
        return math.fsum(record.dt for record in self.records)

    @property
    def energy(self) -> float:
        """Integral of power in mJ."""
        return math.fsum(record.power * record.dt for record in self.records) / 1000.0

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (r.t, r.f_cpu, r.f_gpu, r.f_mem, r.u_cpu, r.u_gpu, r.u_mem, r.power, r.tokens_done, r.dt, r.phase)
            for r in self.records
        ]
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "SimTrace":
        frame = pd.read_csv(path)
        missing = set(TRACE_COLUMNS) - set(frame.columns)
        if missing:
            msg = f"Trace file {path} lacks columns {sorted(missing)}"
            raise ValueError(msg)
        records = [
            TraceRecord(
                t=float(row.t_ms),
                f_cpu=int(row.f_cpu),
                f_gpu=int(row.f_gpu),
                f_mem=int(row.f_mem),
                u_cpu=float(row.u_cpu),
                u_gpu=float(row.u_gpu),
                u_mem=float(row.u_mem),
                power=float(row.power_mw),
                tokens_done=int(row.tokens_done),
                dt=float(row.dt_ms),
                phase=row.phase,
            )
            for row in frame.itertuples(index=False)
        ]
        return cls(records)


@dataclass(frozen=True)
class ScheduleEvent:
    """Governor changes applied at ``time_ms``: a frequency pins, ``"default"`` unpins, ``None`` leaves as is."""

    time_ms: int
    cpu: Optional[GovernorSpec] = None
    gpu: Optional[GovernorSpec] = None
    mem: Optional[GovernorSpec] = None

    def changes(self) -> Iterator[Tuple[Component, GovernorSpec]]:
        for component in ("cpu", "gpu", "mem"):
            spec = getattr(self, component)
            if spec is not None:
                yield component, spec


@dataclass(frozen=True)
class Scenario:
    """
    A phase run under a timed governor schedule.

    Attributes
    ----------
    phase : PhaseSpec
    schedule : Tuple[ScheduleEvent, ...]
        Non-decreasing in time, first event at t=0.
    duration_ms : Optional[float]
        Stop after this much simulated time even if tokens remain.
    initial : Optional[FreqConfig]
        Starting frequencies of governed components, table maxima when omitted.
    """

    phase: PhaseSpec
    schedule: Tuple[ScheduleEvent, ...] = (ScheduleEvent(0),)
    duration_ms: Optional[float] = None
    initial: Optional[FreqConfig] = None

    def __post_init__(self) -> None:
        if not self.schedule or self.schedule[0].time_ms != 0:
            msg = "A scenario schedule must start with an event at t=0."
            raise ValueError(msg)
        times = [event.time_ms for event in self.schedule]
        if any(a > b for a, b in zip(times, times[1:])):
            msg = f"Schedule times must be non-decreasing, got {times}."
            raise ValueError(msg)


def spiral_scenario(
    component: Literal["gpu", "cpu"], phase: PhaseSpec, pin_freq: Optional[int] = None, release_ms: int = 250
) -> Scenario:
    """Pin one processor high, then hand it back to its governor while the other governor stays active."""
    if component == "gpu":
        start = ScheduleEvent(0, gpu=pin_freq or 848)
        release = ScheduleEvent(release_ms, gpu="default")
    else:
        start = ScheduleEvent(0, cpu=pin_freq or 2188)
        release = ScheduleEvent(release_ms, cpu="default")
    return Scenario(phase=phase, schedule=(start, release))


class _OperatingPoints:
    """Memoized steady state and power of the combinations a run visits."""

    def __init__(self, calib: Calibration, params: PhaseParams) -> None:
        self._calib = calib
        self._params = params
        self._cache: Dict[Tuple[int, int, int], Tuple[UtilPoint, float, Dict[str, float]]] = {}

    def get(self, cfg: FreqConfig) -> Tuple[UtilPoint, float, Dict[str, float]]:
        key = (cfg.f_cpu, cfg.f_gpu, cfg.f_mem)
        point = self._cache.get(key)  # type: ignore[arg-type]
        if point is None:
            up = steady_state(cfg, self._params)
            parts = component_power(cfg, up, self._calib.power, self._calib.table)
            point = (up, sum(parts.values()), parts)
            self._cache[key] = point  # type: ignore[index]
        return point


def _tokens_done(phase: PhaseSpec, kernels: float) -> int:
    if phase.kind == "prefill":
        return min(phase.prompt_tokens, int(kernels * phase.prompt_tokens / phase.kernels_per_token + _TOKEN_EPS))
    return min(phase.decode_tokens, int(kernels / phase.kernels_per_token + _TOKEN_EPS))


def _closed_form(calib: Calibration, govs: GovernorSet, phase: PhaseSpec) -> PhaseResult:
    cfg = govs.frequencies()
    up, power, parts = _OperatingPoints(calib, calib.perf.for_phase(phase)).get(cfg)
    duration = phase.total_kernels * up.period
    per_token = duration / phase.tokens
    if per_token > calib.engine.stall_limit_ms:
        msg = f"No token completes within {calib.engine.stall_limit_ms:.0f} ms at {cfg}"
        raise NonTermination(msg)
    ticks = math.ceil(duration) - 1
    if ticks > 0:
        # the EAS load keeps tracking underneath the pins
        govs.tick_cpu(up.u_cpu, cfg.f_cpu, ticks)  # type: ignore[arg-type]
    return PhaseResult(
        phase=phase,
        duration=duration,
        avg_power=power,
        energy=power * duration / 1000.0,
        tokens=phase.tokens,
        steady_power=power,
        energy_breakdown={name: p * duration / 1000.0 for name, p in parts.items()},
        effective_freq={"cpu": float(cfg.f_cpu), "gpu": float(cfg.f_gpu), "mem": float(cfg.f_mem)},  # type: ignore[arg-type]
    )


def _simulate(
    calib: Calibration,
    govs: GovernorSet,
    phase: PhaseSpec,
    record: bool,
    events: Sequence[ScheduleEvent] = (),
    duration_ms: Optional[float] = None,
) -> Tuple[SimTrace, PhaseResult]:
    points = _OperatingPoints(calib, calib.perf.for_phase(phase))
    gpu_window = calib.governors.quickstep.window_ms
    mem_period = calib.governors.interactive.period_ms
    warmup = calib.engine.warmup_ms
    stall_limit = calib.engine.stall_limit_ms
    total = float(phase.total_kernels)
    pending: Deque[ScheduleEvent] = deque(events)

    records: List[TraceRecord] = []
    energy_terms: List[float] = []
    steady_terms: List[float] = []
    steady_dts: List[float] = []
    part_terms: Dict[str, List[float]] = {"idle": [], "cpu": [], "gpu": [], "mem": []}
    freq_terms: Dict[str, List[float]] = {"cpu": [], "gpu": [], "mem": []}

    tick = 0
    t = 0.0
    done = 0.0
    tokens = 0
    last_token_t = 0.0
    acc_gpu = acc_mem = 0.0
    n_gpu = n_mem = 0
    finished = False

    while True:
        while pending and pending[0].time_ms <= tick:
            for component, spec in pending.popleft().changes():
                govs.apply(component, spec)

        cfg = govs.frequencies()
        up, power, parts = points.get(cfg)
        rate = 1.0 / up.period

        span = 1
        if not record and govs.is_pinned("cpu"):
            # nothing changes before the next window, event or warm-up boundary
            bounds = [gpu_window - n_gpu, mem_period - n_mem]
            if pending:
                bounds.append(pending[0].time_ms - tick)
            if tick < warmup:
                bounds.append(math.ceil(warmup) - tick)
            if duration_ms is not None:
                bounds.append(math.ceil(duration_ms) - tick)
            span = max(1, min(bounds))

        dt = float(span)
        if done + rate * dt >= total:
            dt = (total - done) / rate
            done = total
            finished = True
        else:
            done += rate * dt

        energy_terms.append(power * dt)
        if t >= warmup:
            steady_terms.append(power * dt)
            steady_dts.append(dt)
        for name, value in parts.items():
            part_terms[name].append(value * dt)
        for component, freq in cfg.items():
            freq_terms[component].append(freq * dt)  # type: ignore[operator]

        new_tokens = phase.tokens if finished else _tokens_done(phase, done)
        if new_tokens > tokens:
            tokens = new_tokens
            last_token_t = t + dt
        if record:
            records.append(
                TraceRecord(
                    t=t,
                    f_cpu=cfg.f_cpu,  # type: ignore[arg-type]
                    f_gpu=cfg.f_gpu,  # type: ignore[arg-type]
                    f_mem=cfg.f_mem,  # type: ignore[arg-type]
                    u_cpu=up.u_cpu,
                    u_gpu=up.u_gpu,
                    u_mem=up.u_mem,
                    power=power,
                    tokens_done=tokens,
                    dt=dt,
                    phase=phase.kind,
                )
            )
        t += dt
        tick += span
        if finished or (duration_ms is not None and t >= duration_ms):
            break
        if t - last_token_t > stall_limit:
            msg = f"No token completed in {stall_limit:.0f} ms (t={t:.0f} ms, frequencies {cfg})"
            raise NonTermination(msg)

        govs.tick_cpu(up.u_cpu, cfg.f_cpu, span)  # type: ignore[arg-type]
        acc_gpu += up.u_gpu * span
        n_gpu += span
        if n_gpu >= gpu_window:
            govs.step_gpu(min(1.0, acc_gpu / n_gpu))
            acc_gpu, n_gpu = 0.0, 0
        acc_mem += up.u_mem * span
        n_mem += span
        if n_mem >= mem_period:
            govs.step_mem(min(1.0, acc_mem / n_mem))
            acc_mem, n_mem = 0.0, 0

    energy = math.fsum(energy_terms) / 1000.0
    avg_power = math.fsum(energy_terms) / t
    steady_time = math.fsum(steady_dts)
    steady_power = math.fsum(steady_terms) / steady_time if t > 2 * warmup and steady_time > 0 else avg_power
    result = PhaseResult(
        phase=phase,
        duration=t,
        avg_power=avg_power,
        energy=energy,
        tokens=tokens,
        steady_power=steady_power,
        energy_breakdown={name: math.fsum(terms) / 1000.0 for name, terms in part_terms.items()},
        effective_freq={name: math.fsum(terms) / t for name, terms in freq_terms.items()},
    )
    return SimTrace(records), result


def run_phase(
    calib: Calibration, gov: GovernorSet, phase: PhaseSpec, record: bool = True
) -> Tuple[SimTrace, PhaseResult]:
    """
    Simulate one phase until all of its tokens complete.

    Parameters
    ----------
    calib : Calibration
        Workload, power and governor parameters.
    gov : GovernorSet
        Controllers for the run; mutated in place, so pass the same set to the next phase
        to carry governor state over.
    phase : PhaseSpec
    record : bool
        Keep the per-tick trace. Without it pinned-CPU runs advance a whole governor window
        at a time and fully pinned runs are evaluated in closed form.

    Returns
    -------
    Tuple[SimTrace, PhaseResult]
        The trace is empty when ``record`` is false.

    Raises
    ------
    NonTermination
        If no token completes within the calibration's stall limit.
    """
    if not record and gov.all_pinned:
        return SimTrace(), _closed_form(calib, gov, phase)
    return _simulate(calib, gov, phase, record)


def run_scenario(calib: Calibration, sc: Scenario) -> SimTrace:
    """Run ``sc`` from fresh default governors, applying its schedule as simulated time passes."""
    govs = GovernorSet.default(calib.table, calib.governors, initial=sc.initial)
    trace, result = _simulate(calib, govs, sc.phase, record=True, events=sc.schedule, duration_ms=sc.duration_ms)
    logger.info("Scenario finished after %.1f ms with %d tokens (%s)", result.duration, result.tokens, govs.describe())
    return trace
