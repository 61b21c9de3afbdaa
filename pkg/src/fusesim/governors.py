"""Frequency controllers: quickstep (GPU), EAS (CPU), interactive (memory) and Pin bounds.

Governor states are plain mutable dataclasses owned by a single simulation run. The
``*_step``/``*_tick`` functions update a state in place and return its new output. A
``Pin`` never replaces a governor: the governor keeps stepping and its proposal is
clamped into the pin's bounds.
"""

import bisect
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

from typing_extensions import Literal

from fusesim.exceptions import InvalidFrequency
from fusesim.models import (
    Component,
    EasParams,
    FreqConfig,
    FrequencyTable,
    GovernorParams,
    InteractiveParams,
    QuickstepParams,
)

COMPONENTS: Sequence[Component] = ("cpu", "gpu", "mem")


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        msg = f"{name} must lie in [0, 1], got {value}"
        raise ValueError(msg)


@dataclass
class QuickstepState:
    current_freq: int
    params: QuickstepParams

    @property
    def window(self) -> int:
        return self.params.window_ms


@dataclass
class EasState:
    current_freq: int
    params: EasParams = EasParams()
    # None until the first sample arrives
    load: Optional[float] = None


@dataclass
class InteractiveMemState:
    current_freq: int
    params: InteractiveParams = InteractiveParams()

    @property
    def period(self) -> int:
        return self.params.period_ms


@dataclass(frozen=True)
class Pin:
    """Frequency bounds laid over a live governor; ``low == high`` fixes the frequency."""

    low: int
    high: int

    def __post_init__(self) -> None:
        if self.low > self.high:
            msg = f"Pin bounds are inverted: {self.low} > {self.high}"
            raise ValueError(msg)

    @property
    def fixed(self) -> bool:
        return self.low == self.high

    def clamp(self, freq: int) -> int:
        return min(max(freq, self.low), self.high)

    def __str__(self) -> str:
        return f"pin({self.low})" if self.fixed else f"pin({self.low}-{self.high})"


def quickstep_step(state: QuickstepState, window_avg_util: float) -> int:
    """Move one table step up when above the current row's band, one down when below it."""
    _check_fraction("window_avg_util", window_avg_util)
    rows = state.params.rows
    index = next((i for i, row in enumerate(rows) if row.freq == state.current_freq), None)
    if index is None:
        msg = f"GPU at {state.current_freq} MHz has no quickstep row"
        raise InvalidFrequency(msg)
    row = rows[index]
    if window_avg_util > row.max_util:
        index = min(index + 1, len(rows) - 1)
    elif window_avg_util < row.min_util:
        index = max(index - 1, 0)
    state.current_freq = rows[index].freq
    return state.current_freq


def eas_tick(state: EasState, busy_fraction: float, f_cur: int, f_max: int, ticks: int = 1) -> float:
    """
    Fold ``ticks`` identical 1 ms samples into the decayed, frequency-invariant task load.

    Parameters
    ----------
    state : EasState
        Updated in place. A state without a load takes the first sample as its load.
    busy_fraction : float
        Fraction of each tick the inference thread was running.
    f_cur : int
        CPU frequency during the ticks.
    f_max : int
        Highest CPU frequency; the load is expressed at this capacity.
    ticks : int
        Number of consecutive ticks with this sample.

    Returns
    -------
    float
        The new load.
    """
    _check_fraction("busy_fraction", busy_fraction)
    if ticks < 1:
        msg = f"ticks must be positive, got {ticks}"
        raise ValueError(msg)
    params = state.params
    sample = params.capacity * busy_fraction * (f_cur / f_max)
    if state.load is None:
        load = sample
    else:
        weight = params.decay**ticks
        load = weight * state.load + (1.0 - weight) * sample
    state.load = min(max(load, 0.0), params.capacity)
    return state.load


def eas_select(state: EasState, freqs: Sequence[int]) -> int:
    """Lowest frequency whose capacity covers the load plus headroom, else the highest."""
    params = state.params
    needed = params.headroom * (state.load or 0.0)
    f_max = freqs[-1]
    for freq in freqs:
        if params.capacity * (freq / f_max) >= needed:
            state.current_freq = freq
            break
    else:
        state.current_freq = f_max
    return state.current_freq


def interactive_mem_step(state: InteractiveMemState, u_mem: float, freqs: Sequence[int]) -> int:
    _check_fraction("u_mem", u_mem)
    target = state.current_freq * u_mem / state.params.target_load
    index = bisect.bisect_left(freqs, target)
    state.current_freq = freqs[min(index, len(freqs) - 1)]
    return state.current_freq


def make_pin(freq: int, freqs: Sequence[int], high: Optional[int] = None) -> Pin:
    """Fix a component at ``freq``, or bound it to ``[freq, high]`` when ``high`` is given."""
    high = freq if high is None else high
    for bound in (freq, high):
        if bound not in freqs:
            msg = f"Cannot pin to {bound} MHz: not in {tuple(freqs)}"
            raise InvalidFrequency(msg)
    return Pin(freq, high)


GovernorSpec = Union[int, Literal["default"]]


@dataclass
class GovernorSet:
    """
    The controllers of one simulated device.

    A set is owned by exactly one run at a time. Replays hand the same set to
    consecutive phases so that governor state carries over; sweeps build a fresh
    set per evaluation. Pinned components keep their governor running underneath,
    so the EAS load and the window averages are current when a pin is released.
    """

    cpu: EasState
    gpu: QuickstepState
    mem: InteractiveMemState
    table: FrequencyTable
    params: GovernorParams
    pins: Dict[Component, Pin] = field(default_factory=dict)

    @classmethod
    def default(
        cls,
        table: FrequencyTable,
        params: GovernorParams,
        pins: Optional[FreqConfig] = None,
        initial: Optional[FreqConfig] = None,
    ) -> "GovernorSet":
        """
        Default governors starting at the table maxima, with ``pins`` applied.

        Parameters
        ----------
        pins : Optional[FreqConfig]
            Components with a frequency are pinned, ``None`` components run free.
        initial : Optional[FreqConfig]
            Starting frequency of the governors instead of the table maxima.
        """
        initial = initial or FreqConfig(None, None, None)
        start = {c: f if f is not None else table.max(c) for c, f in initial.items()}
        for component, freq in start.items():
            table.check(component, freq)
        govs = cls(
            cpu=EasState(start["cpu"], params.eas),
            gpu=QuickstepState(start["gpu"], params.quickstep),
            mem=InteractiveMemState(start["mem"], params.interactive),
            table=table,
            params=params,
        )
        for component, freq in (pins or FreqConfig(None, None, None)).items():
            if freq is not None:
                govs.apply(component, freq)
        return govs

    def frequencies(self) -> FreqConfig:
        return FreqConfig(self.cpu.current_freq, self.gpu.current_freq, self.mem.current_freq)

    def is_pinned(self, component: Component) -> bool:
        """True when ``component`` is held at a single frequency."""
        pin = self.pins.get(component)
        return pin is not None and pin.fixed

    @property
    def all_pinned(self) -> bool:
        return all(self.is_pinned(c) for c in COMPONENTS)

    def apply(self, component: Component, spec: GovernorSpec) -> None:
        """Pin ``component`` to a frequency, or lift its pin so the governor runs free from where it is."""
        if spec == "default":
            self.pins.pop(component, None)
            return
        self.bound(component, make_pin(int(spec), self.table.freqs(component)))

    def bound(self, component: Component, pin: Pin) -> None:
        self.pins[component] = pin
        self._clamp(component)

    def _clamp(self, component: Component) -> int:
        state = getattr(self, component)
        pin = self.pins.get(component)
        if pin is not None:
            state.current_freq = pin.clamp(state.current_freq)
        return state.current_freq

    def tick_cpu(self, busy_fraction: float, f_cur: int, ticks: int = 1) -> int:
        """Feed the EAS load and clamp its next selection."""
        eas_tick(self.cpu, busy_fraction, f_cur, self.table.max("cpu"), ticks)
        eas_select(self.cpu, self.table.cpu)
        return self._clamp("cpu")

    def step_gpu(self, window_avg_util: float) -> int:
        quickstep_step(self.gpu, window_avg_util)
        return self._clamp("gpu")

    def step_mem(self, u_mem: float) -> int:
        interactive_mem_step(self.mem, u_mem, self.table.mem)
        return self._clamp("mem")

    def describe(self) -> str:
        names = {"cpu": "eas", "gpu": "quickstep", "mem": "interactive"}
        parts = []
        for component in COMPONENTS:
            pin = self.pins.get(component)
            parts.append(f"{component}={pin if pin is not None else names[component]}")
        return " ".join(parts)
