from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from typing_extensions import Literal

from fusesim.exceptions import ConfigurationError, InvalidFrequency

PhaseKind = Literal["prefill", "decode"]
Component = Literal["cpu", "gpu", "mem"]
COMPONENTS: Tuple[Component, ...] = ("cpu", "gpu", "mem")

PIXEL7_CPU = (500, 851, 984, 1106, 1277, 1426, 1582, 1745, 1826, 2048, 2188, 2252, 2401, 2507, 2630, 2704, 2802, 2850)
PIXEL7_GPU = (151, 202, 251, 302, 351, 400, 471, 510, 572, 701, 762, 848)
PIXEL7_MEM = (421, 546, 676, 845, 1014, 1352, 1539, 1716, 2028, 2288, 2535, 2730, 3172)


@dataclass(frozen=True)
class FrequencyTable:
    """
    The discrete frequencies (MHz) each component can run at.

    Attributes
    ----------
    cpu : Tuple[int, ...]
        Available frequencies of the performance CPU cluster, strictly increasing.
    gpu : Tuple[int, ...]
        Available GPU frequencies, strictly increasing.
    mem : Tuple[int, ...]
        Available memory-interface frequencies, strictly increasing.
    """

    cpu: Tuple[int, ...] = PIXEL7_CPU
    gpu: Tuple[int, ...] = PIXEL7_GPU
    mem: Tuple[int, ...] = PIXEL7_MEM

    def __post_init__(self) -> None:
        for component in COMPONENTS:
            freqs = tuple(int(f) for f in getattr(self, component))
            if not freqs:
                msg = f"The {component} frequency list is empty."
                raise ConfigurationError(msg)
            if any(lo >= hi for lo, hi in zip(freqs, freqs[1:])):
                msg = f"The {component} frequency list must be strictly increasing, got {freqs}."
                raise ConfigurationError(msg)
            object.__setattr__(self, component, freqs)

    def freqs(self, component: Component) -> Tuple[int, ...]:
        return getattr(self, component)

    def max(self, component: Component) -> int:
        return self.freqs(component)[-1]

    def min(self, component: Component) -> int:
        return self.freqs(component)[0]

    def check(self, component: Component, freq: int) -> int:
        if freq not in self.freqs(component):
            msg = f"{freq} MHz is not an available {component} frequency: {self.freqs(component)}"
            raise InvalidFrequency(msg)
        return freq

    def validate(self, cfg: "FreqConfig") -> "FreqConfig":
        for component, freq in cfg.items():
            if freq is not None:
                self.check(component, freq)
        return cfg

    @property
    def size(self) -> int:
        return len(self.cpu) * len(self.gpu) * len(self.mem)


@dataclass(frozen=True)
class FreqConfig:
    """
    A (CPU, GPU, memory) frequency combination in MHz.

    A component set to ``None`` is left to its default governor (EAS, quickstep or the
    interactive memory governor). Profiles produced for the frequency search use
    ``f_mem=None`` as the "governor-default memory" marker.
    """

    f_cpu: Optional[int]
    f_gpu: Optional[int]
    f_mem: Optional[int] = None

    def items(self) -> Tuple[Tuple[Component, Optional[int]], ...]:
        return (("cpu", self.f_cpu), ("gpu", self.f_gpu), ("mem", self.f_mem))

    @property
    def is_pinned(self) -> bool:
        return None not in (self.f_cpu, self.f_gpu, self.f_mem)

    def sort_key(self) -> Tuple[int, int, int]:
        # governor-controlled components sort before any pinned frequency
        return (self.f_gpu or 0, self.f_cpu or 0, self.f_mem or 0)

    def __str__(self) -> str:
        def _fmt(freq: Optional[int]) -> str:
            return "gov" if freq is None else str(freq)

        return f"({_fmt(self.f_cpu)}, {_fmt(self.f_gpu)}, {_fmt(self.f_mem)})"


@dataclass(frozen=True)
class PhaseSpec:
    """
    One inference phase.

    Attributes
    ----------
    kind : PhaseKind
        ``"prefill"`` or ``"decode"``.
    prompt_tokens : int
        Prompt length N_p, used by prefill only.
    decode_tokens : int
        Number of generated tokens N_d, used by decode only.
    kernels_per_token : int
        GPU kernels launched per decoded token, or per batched prefill pass.
    """

    kind: PhaseKind
    prompt_tokens: int = 0
    decode_tokens: int = 0
    kernels_per_token: int = 100

    def __post_init__(self) -> None:
        if self.kind not in ("prefill", "decode"):
            msg = f"Unknown phase kind {self.kind!r}."
            raise ValueError(msg)
        if self.kernels_per_token < 1:
            msg = "kernels_per_token must be at least 1."
            raise ValueError(msg)
        if self.kind == "prefill" and self.prompt_tokens < 1:
            msg = "A prefill phase needs at least one prompt token."
            raise ValueError(msg)
        if self.kind == "decode" and self.decode_tokens < 1:
            msg = "A decode phase needs at least one decode token."
            raise ValueError(msg)

    @classmethod
    def prefill(cls, prompt_tokens: int, kernels_per_token: int = 100) -> "PhaseSpec":
        return cls("prefill", prompt_tokens=prompt_tokens, kernels_per_token=kernels_per_token)

    @classmethod
    def decode(cls, decode_tokens: int, kernels_per_token: int = 100) -> "PhaseSpec":
        return cls("decode", decode_tokens=decode_tokens, kernels_per_token=kernels_per_token)

    @property
    def tokens(self) -> int:
        return self.prompt_tokens if self.kind == "prefill" else self.decode_tokens

    @property
    def total_kernels(self) -> int:
        # prefill runs the whole prompt as one batched pass
        if self.kind == "prefill":
            return self.kernels_per_token
        return self.kernels_per_token * self.decode_tokens

    @property
    def key(self) -> Tuple[str, int, int]:
        return (self.kind, self.prompt_tokens, self.decode_tokens)


@dataclass(frozen=True)
class PhaseParams:
    """
    Per-kernel work of one phase kind.

    Attributes
    ----------
    w_c : float
        CPU issue work (MHz·ms).
    w_g : float
        GPU compute work (MHz·ms).
    b_m : float
        Memory work (MHz·ms), already divided by the bus-width factor.
    g_c : float
        CPU-speed-dependent pipeline-gap work (MHz·ms).
    g0 : float
        Fixed gap (ms).
    issue_overlap : float
        Fraction of the CPU issue time hidden behind the previous kernel, in [0, 1).
    kernels_per_token : int
        Kernels per decoded token or per prefill pass.
    n_ref : int
        Reference prompt length the prefill work was calibrated at.
    cpu_work_exponent : float
        Exponent scaling CPU-side prefill work with the prompt length.
    """

    w_c: float
    w_g: float
    b_m: float
    g_c: float = 0.0
    g0: float = 0.0
    issue_overlap: float = 0.0
    kernels_per_token: int = 100
    n_ref: int = 32
    cpu_work_exponent: float = 0.5

    def __post_init__(self) -> None:
        if min(self.w_c, self.b_m, self.g_c, self.g0) < 0:
            msg = "Work terms must be non-negative."
            raise ConfigurationError(msg)
        if self.w_g <= 0:
            msg = "GPU work w_g must be positive."
            raise ConfigurationError(msg)
        if not 0.0 <= self.issue_overlap < 1.0:
            msg = f"issue_overlap must lie in [0, 1), got {self.issue_overlap}."
            raise ConfigurationError(msg)
        if self.n_ref < 1 or self.kernels_per_token < 1:
            msg = "n_ref and kernels_per_token must be positive."
            raise ConfigurationError(msg)

    def scaled(self, phase: PhaseSpec) -> "PhaseParams":
        """Work of a prefill pass over ``phase.prompt_tokens``; decode work is per token and unscaled."""
        if phase.kind == "decode":
            return self
        ratio = phase.prompt_tokens / self.n_ref
        cpu_ratio = ratio**self.cpu_work_exponent
        return PhaseParams(
            w_c=self.w_c * cpu_ratio,
            w_g=self.w_g * ratio,
            b_m=self.b_m * ratio,
            g_c=self.g_c * cpu_ratio,
            g0=self.g0,
            issue_overlap=self.issue_overlap,
            kernels_per_token=self.kernels_per_token,
            n_ref=self.n_ref,
            cpu_work_exponent=self.cpu_work_exponent,
        )


@dataclass(frozen=True)
class PerfModelParams:
    decode: PhaseParams
    prefill: PhaseParams

    def for_phase(self, phase: PhaseSpec) -> PhaseParams:
        params = self.prefill if phase.kind == "prefill" else self.decode
        return params.scaled(phase)


@dataclass(frozen=True)
class ComponentPower:
    """Dynamic power of one component: ``a·f̂^exponent + b·f̂`` mW at full utilization."""

    a: float
    b: float
    exponent: float = 3.0

    def __post_init__(self) -> None:
        if self.a < 0 or self.b < 0:
            msg = "Power coefficients must be non-negative."
            raise ConfigurationError(msg)

    def at(self, f_hat: float) -> float:
        return self.a * f_hat**self.exponent + self.b * f_hat


@dataclass(frozen=True)
class PowerModelParams:
    p_idle: float = 600.0
    cpu: ComponentPower = ComponentPower(2600.0, 400.0, 3.0)
    gpu: ComponentPower = ComponentPower(2000.0, 400.0, 3.0)
    mem: ComponentPower = ComponentPower(1200.0, 300.0, 2.0)

    def __post_init__(self) -> None:
        if self.p_idle <= 0:
            msg = "p_idle must be positive."
            raise ConfigurationError(msg)

    def component(self, component: Component) -> ComponentPower:
        return getattr(self, component)


@dataclass(frozen=True)
class KernelTimes:
    t_issue: float
    t_exec: float
    t_gap: float


@dataclass(frozen=True)
class UtilPoint:
    """
    Steady-state operating point of a frequency combination.

    Attributes
    ----------
    period : float
        Kernel period T in ms.
    u_cpu, u_gpu, u_mem : float
        Busy fractions in [0, 1].
    """

    period: float
    u_cpu: float
    u_gpu: float
    u_mem: float

    def util(self, component: Component) -> float:
        return getattr(self, f"u_{component}")


@dataclass(frozen=True)
class QuickstepRow:
    freq: int
    min_util: float
    max_util: float


@dataclass(frozen=True)
class QuickstepParams:
    rows: Tuple[QuickstepRow, ...]
    window_ms: int = 20

    def row(self, freq: int) -> QuickstepRow:
        for row in self.rows:
            if row.freq == freq:
                return row
        msg = f"No quickstep band for {freq} MHz."
        raise InvalidFrequency(msg)

    @classmethod
    def uniform(
        cls, freqs: Tuple[int, ...], min_util: float = 0.60, max_util: float = 0.90, window_ms: int = 20
    ) -> "QuickstepParams":
        """Same band on every row, open at the bottom of the lowest row and the top of the highest."""
        rows = []
        for i, freq in enumerate(freqs):
            lo = 0.0 if i == 0 else min_util
            hi = 1.0 if i == len(freqs) - 1 else max_util
            rows.append(QuickstepRow(freq, lo, hi))
        return cls(tuple(rows), window_ms)


@dataclass(frozen=True)
class EasParams:
    decay: float = 0.5 ** (1 / 32)
    headroom: float = 1.25
    capacity: float = 1024.0


@dataclass(frozen=True)
class InteractiveParams:
    target_load: float = 0.7
    period_ms: int = 20


@dataclass(frozen=True)
class GovernorParams:
    quickstep: QuickstepParams
    eas: EasParams = EasParams()
    interactive: InteractiveParams = InteractiveParams()


@dataclass(frozen=True)
class EngineParams:
    tick_ms: float = 1.0
    warmup_ms: float = 50.0
    stall_limit_ms: float = 60_000.0


@dataclass(frozen=True)
class Anchor:
    """An observed utilization the workload model is fitted to."""

    phase: PhaseKind
    cfg: FreqConfig
    metric: Literal["u_cpu", "u_gpu"]
    value: float


@dataclass(frozen=True)
class PhaseResult:
    """
    Outcome of one simulated phase.

    Attributes
    ----------
    duration : float
        Phase latency in ms (TTFT for prefill, N_d·TPOT for decode).
    avg_power : float
        Time-averaged power over the whole phase in mW, so ``avg_power·duration`` is the energy.
    energy : float
        Integral of power over the whole phase in mJ.
    tokens : int
        Tokens produced (prompt tokens for prefill).
    steady_power : float
        Time-averaged power in mW after the warm-up window; equals ``avg_power`` for short phases.
    energy_breakdown : Dict[str, float]
        Energy in mJ split into ``idle``, ``cpu``, ``gpu`` and ``mem``.
    effective_freq : Dict[str, float]
        Time-weighted average frequency per component.
    """

    phase: PhaseSpec
    duration: float
    avg_power: float
    energy: float
    tokens: int
    steady_power: float = 0.0
    energy_breakdown: Dict[str, float] = field(default_factory=dict)
    effective_freq: Dict[str, float] = field(default_factory=dict)

    @property
    def latency(self) -> float:
        """TTFT for prefill, TPOT for decode."""
        if self.phase.kind == "prefill":
            return self.duration
        return self.duration / self.phase.decode_tokens


@dataclass(frozen=True)
class ProfileEntry:
    """
    One measured frequency combination.

    Attributes
    ----------
    cfg : FreqConfig
        The combination; ``None`` components ran under their default governor.
    phase : PhaseSpec
        The phase that was simulated.
    latency : float
        TTFT (prefill) or TPOT (decode), ms.
    energy_per_token : float
        mJ per token.
    avg_power : float
        mW.
    """

    cfg: FreqConfig
    phase: PhaseSpec
    latency: float
    energy_per_token: float
    avg_power: float

    @property
    def key(self) -> Tuple[Tuple[str, int, int], Tuple[Optional[int], Optional[int], Optional[int]]]:
        return (self.phase.key, (self.cfg.f_cpu, self.cfg.f_gpu, self.cfg.f_mem))


@dataclass(frozen=True)
class Request:
    id: str
    prefill_tokens: int
    decode_tokens: int

    def __post_init__(self) -> None:
        if not 1 <= self.prefill_tokens <= MAX_PREFILL_TOKENS:
            msg = f"prefill_tokens must be within [1, {MAX_PREFILL_TOKENS}], got {self.prefill_tokens}"
            raise ValueError(msg)
        if not 1 <= self.decode_tokens <= MAX_DECODE_TOKENS:
            msg = f"decode_tokens must be within [1, {MAX_DECODE_TOKENS}], got {self.decode_tokens}"
            raise ValueError(msg)


MAX_PREFILL_TOKENS = 512
MAX_DECODE_TOKENS = 256
