"""
Two-step offline frequency search.

Step 1 walks the GPU ladder downwards with the CPU left to EAS and picks at most two
GPU candidates; step 2 walks the pinned CPU ladder downwards for each candidate. Memory
stays under its governor throughout. The resulting per-setting configurations form the
lookup table the runtime pins from.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from typing_extensions import Literal, Protocol, runtime_checkable

from fusesim.calibration import Calibration
from fusesim.exceptions import (
    BudgetInfeasible,
    FuseSimError,
    TableFileError,
    TargetInfeasible,
)
from fusesim.models import FreqConfig, FrequencyTable, PhaseKind, PhaseSpec, ProfileEntry
from fusesim.profiler import evaluate, pin_opt

logger = logging.getLogger(__name__)

GoalKind = Literal["g1", "g2"]

PREFILL_REPRESENTATIVES = (32, 64, 128, 256, 512)
# geometric midpoints between consecutive representatives
PREFILL_BOUNDARIES = (48, 96, 192, 384)
DECODE_REPRESENTATIVE = 32


@runtime_checkable
class Evaluator(Protocol):
    """Measures one configuration; ``f_cpu=None`` leaves the CPU to EAS."""

    def __call__(self, f_cpu: Optional[int], f_gpu: int) -> ProfileEntry: ...


@dataclass(frozen=True)
class SearchGoal:
    """
    What a search optimizes.

    Attributes
    ----------
    kind : GoalKind
        ``"g1"`` minimizes latency under an energy budget, ``"g2"`` minimizes energy under a latency target.
    value : float
        Energy budget in mJ per token (g1) or latency target in ms (g2).
    """

    kind: GoalKind
    value: float

    def __post_init__(self) -> None:
        if self.kind not in ("g1", "g2"):
            msg = f"Unknown search goal {self.kind!r}, expected 'g1' or 'g2'."
            raise ValueError(msg)
        if not self.value > 0:
            msg = f"A search goal needs a positive budget or target, got {self.value}."
            raise ValueError(msg)

    @classmethod
    def g1(cls, energy_budget: float) -> "SearchGoal":
        return cls("g1", energy_budget)

    @classmethod
    def g2(cls, latency_target: float) -> "SearchGoal":
        return cls("g2", latency_target)

    def __str__(self) -> str:
        unit = "mJ/token" if self.kind == "g1" else "ms"
        return f"{self.kind}({self.value:.4f} {unit})"


@dataclass
class SearchReport:
    """
    Trace of one search.

    Attributes
    ----------
    goal : SearchGoal
    candidates : Tuple[int, ...]
        GPU frequencies step 2 explored, highest first.
    step1 : List[ProfileEntry]
        Evaluations of the GPU ladder, in evaluation order.
    step2 : List[ProfileEntry]
        Evaluations of the CPU ladders, in evaluation order.
    result : Optional[ProfileEntry]
        The chosen configuration's entry.
    """

    goal: SearchGoal
    candidates: Tuple[int, ...] = ()
    step1: List[ProfileEntry] = field(default_factory=list)
    step2: List[ProfileEntry] = field(default_factory=list)
    result: Optional[ProfileEntry] = None

    @property
    def inferences_step1(self) -> int:
        return len(self.step1)

    @property
    def inferences_step2(self) -> int:
        return len(self.step2)

    @property
    def inferences(self) -> int:
        return self.inferences_step1 + self.inferences_step2

    @property
    def cfg(self) -> FreqConfig:
        if self.result is None:
            msg = "The search has not produced a configuration."
            raise ValueError(msg)
        return self.result.cfg


def engine_evaluator(calib: Calibration, phase: PhaseSpec) -> Evaluator:
    """Each call is one simulated inference from fresh governors, memory under its governor."""

    def _evaluate(f_cpu: Optional[int], f_gpu: int) -> ProfileEntry:
        return evaluate(calib, FreqConfig(f_cpu, f_gpu, None), phase)

    return _evaluate


def _step(report: SearchReport, entries: List[ProfileEntry], entry: ProfileEntry, label: str) -> ProfileEntry:
    entries.append(entry)
    logger.debug(
        "%s %s: %s latency=%.4f ms energy=%.4f mJ/token",
        report.goal,
        label,
        entry.cfg,
        entry.latency,
        entry.energy_per_token,
    )
    return entry


def search_g1(evaluator: Evaluator, table: FrequencyTable, energy_budget: float) -> Tuple[FreqConfig, SearchReport]:
    """
    Lowest-latency configuration whose energy per token fits ``energy_budget``.

    Step 1 stops at the first GPU frequency F, from the top, meeting the budget with the
    CPU under EAS; F and the frequency right above it become the candidates. Step 2 stops
    each candidate's CPU descent at the first pinned frequency meeting the budget.

    Raises
    ------
    BudgetInfeasible
        If no evaluated configuration meets the budget.
    """
    report = SearchReport(SearchGoal.g1(energy_budget))
    gpus = table.gpu

    first_fit: Optional[int] = None
    for index in range(len(gpus) - 1, -1, -1):
        entry = _step(report, report.step1, evaluator(None, gpus[index]), "step 1")
        if entry.energy_per_token <= energy_budget:
            first_fit = index
            break
    if first_fit is None:
        msg = f"No GPU frequency meets the energy budget of {energy_budget:.4f} mJ/token."
        raise BudgetInfeasible(msg)
    above = (gpus[first_fit + 1],) if first_fit + 1 < len(gpus) else ()
    report.candidates = above + (gpus[first_fit],)

    feasible = []
    for f_gpu in report.candidates:
        for f_cpu in reversed(table.cpu):
            entry = _step(report, report.step2, evaluator(f_cpu, f_gpu), "step 2")
            if entry.energy_per_token <= energy_budget:
                feasible.append(entry)
                break
    if not feasible:
        msg = f"No pinned CPU frequency meets the energy budget of {energy_budget:.4f} mJ/token."
        raise BudgetInfeasible(msg)
    report.result = pin_opt(feasible, energy_budget=energy_budget)
    return report.cfg, report


def search_g2(evaluator: Evaluator, table: FrequencyTable, latency_target: float) -> Tuple[FreqConfig, SearchReport]:
    """
    Lowest-energy configuration whose latency meets ``latency_target``.

    Step 1 descends the GPU ladder with the CPU under EAS until energy rises; the frequency
    before the rise is the minimum-energy one. If it already meets the target it is the only
    candidate, otherwise the two consecutive frequencies whose latencies straddle the target
    are. Step 2 descends each candidate's pinned CPU ladder until latency exceeds the target or
    energy rises.

    Raises
    ------
    TargetInfeasible
        If no evaluated configuration meets the target.
    """
    report = SearchReport(SearchGoal.g2(latency_target))
    gpus = table.gpu

    ladder: List[ProfileEntry] = []
    for f_gpu in reversed(gpus):
        entry = _step(report, report.step1, evaluator(None, f_gpu), "step 1")
        if ladder and entry.energy_per_token > ladder[-1].energy_per_token:
            break
        ladder.append(entry)
    min_energy = ladder[-1]

    if min_energy.latency <= latency_target:
        report.candidates = (min_energy.cfg.f_gpu,)  # type: ignore[assignment]
    else:
        report.candidates = (ladder[0].cfg.f_gpu,)  # type: ignore[assignment]
        for upper, lower in zip(ladder, ladder[1:]):
            if upper.latency <= latency_target < lower.latency:
                report.candidates = (upper.cfg.f_gpu, lower.cfg.f_gpu)  # type: ignore[assignment]
                break

    feasible = []
    for f_gpu in report.candidates:
        previous: Optional[ProfileEntry] = None
        for f_cpu in reversed(table.cpu):
            entry = _step(report, report.step2, evaluator(f_cpu, f_gpu), "step 2")
            if entry.latency > latency_target:
                break
            feasible.append(entry)
            if previous is not None and entry.energy_per_token > previous.energy_per_token:
                break
            previous = entry
    if not feasible:
        msg = f"Even the fastest searched configuration misses the latency target of {latency_target:.4f} ms."
        raise TargetInfeasible(msg)
    report.result = pin_opt(feasible, latency_target=latency_target)
    return report.cfg, report


def run_search(evaluator: Evaluator, table: FrequencyTable, goal: SearchGoal) -> Tuple[FreqConfig, SearchReport]:
    if goal.kind == "g1":
        return search_g1(evaluator, table, goal.value)
    return search_g2(evaluator, table, goal.value)


def is_quasi_convex(values: Sequence[float]) -> bool:
    """At most one sign change among the non-zero consecutive differences."""
    signs = [1 if b > a else -1 for a, b in zip(values, values[1:]) if b != a]
    return sum(1 for s, t in zip(signs, signs[1:]) if s != t) <= 1


@dataclass(frozen=True)
class OracleCheck:
    """Brute-force optimum over the CPU × GPU grid and whether the searched curves are quasi-convex."""

    optimum: ProfileEntry
    quasi_convex: bool

    @property
    def applicable(self) -> bool:
        return self.quasi_convex

    def matches(self, goal: SearchGoal, result: ProfileEntry) -> bool:
        if goal.kind == "g1":
            return result.latency == self.optimum.latency
        return result.energy_per_token == self.optimum.energy_per_token


def oracle_check(evaluator: Evaluator, table: FrequencyTable, report: SearchReport) -> OracleCheck:
    """Evaluate the whole grid for ``report``'s goal and run the pre-checks on it."""
    grid = {(f_cpu, f_gpu): evaluator(f_cpu, f_gpu) for f_gpu in table.gpu for f_cpu in table.cpu}
    goal = report.goal
    if goal.kind == "g1":
        optimum = pin_opt(grid.values(), energy_budget=goal.value)
    else:
        optimum = pin_opt(grid.values(), latency_target=goal.value)

    axes = {f_gpu: [grid[(f_cpu, f_gpu)] for f_cpu in table.cpu] for f_gpu in report.candidates}
    ladder = [evaluator(None, f_gpu).energy_per_token for f_gpu in table.gpu]
    quasi_convex = is_quasi_convex(ladder) and all(
        is_quasi_convex([e.energy_per_token for e in axis]) for axis in axes.values()
    )
    return OracleCheck(optimum, quasi_convex)


def bucket_prefill_length(n_p: int) -> Tuple[int, int]:
    """Bucket index and representative prompt length for a prefill of ``n_p`` tokens."""
    if n_p < 1:
        msg = f"A prompt has at least one token, got {n_p}."
        raise ValueError(msg)
    for index, bound in enumerate(PREFILL_BOUNDARIES):
        if n_p <= bound:
            return index, PREFILL_REPRESENTATIVES[index]
    return len(PREFILL_BOUNDARIES), PREFILL_REPRESENTATIVES[-1]


def setting_label(phase: PhaseSpec) -> str:
    return f"{phase.kind}-{phase.tokens}"


def fuse_settings(calib: Calibration) -> Dict[str, PhaseSpec]:
    """The five representative prefill lengths and the representative decode length."""
    settings = [PhaseSpec.prefill(n, calib.perf.prefill.kernels_per_token) for n in PREFILL_REPRESENTATIVES]
    settings.append(PhaseSpec.decode(DECODE_REPRESENTATIVE, calib.perf.decode.kernels_per_token))
    return {setting_label(phase): phase for phase in settings}


def gov_baseline(calib: Calibration, settings: Optional[Mapping[str, PhaseSpec]] = None) -> Dict[str, ProfileEntry]:
    """Each setting measured under the default governors."""
    settings = settings or fuse_settings(calib)
    return {label: evaluate(calib, FreqConfig(None, None, None), phase) for label, phase in settings.items()}


def gov_goals(
    calib: Calibration, kind: GoalKind, baseline: Optional[Mapping[str, ProfileEntry]] = None
) -> Dict[str, SearchGoal]:
    """Goals matching the default governors: their energy per token as budget, or their latency as target."""
    baseline = baseline or gov_baseline(calib)
    if kind == "g1":
        return {label: SearchGoal.g1(entry.energy_per_token) for label, entry in baseline.items()}
    return {label: SearchGoal.g2(entry.latency) for label, entry in baseline.items()}


@dataclass(frozen=True)
class TableEntry:
    cfg: FreqConfig
    goal: SearchGoal
    inferences_step1: int
    inferences_step2: int


@dataclass(frozen=True)
class FuseTable:
    """
    Per-model configurations the runtime pins at each phase start.

    Attributes
    ----------
    model : str
    calib_hash : str
        Calibration the searches ran on.
    entries : Dict[str, TableEntry]
        Keyed by setting label, ``prefill-<n>`` for the five representatives and ``decode-32``.
    """

    model: str
    calib_hash: str
    entries: Dict[str, TableEntry]

    def __post_init__(self) -> None:
        expected = set(_expected_labels())
        if set(self.entries) != expected:
            msg = f"A lookup table needs exactly the settings {sorted(expected)}, got {sorted(self.entries)}."
            raise TableFileError(msg)

    @property
    def total_inferences(self) -> int:
        return sum(e.inferences_step1 + e.inferences_step2 for e in self.entries.values())

    @property
    def mean_inferences(self) -> float:
        return self.total_inferences / len(self.entries)

    def validate(self, table: FrequencyTable) -> "FuseTable":
        for entry in self.entries.values():
            table.validate(entry.cfg)
        return self


def _expected_labels() -> List[str]:
    return [f"prefill-{n}" for n in PREFILL_REPRESENTATIVES] + [f"decode-{DECODE_REPRESENTATIVE}"]


def build_config_table(
    calib: Calibration,
    goals: Mapping[str, SearchGoal],
    max_workers: int = 1,
    evaluator_factory: Optional[Callable[[Calibration, PhaseSpec], Evaluator]] = None,
) -> Tuple[FuseTable, Dict[str, SearchReport]]:
    """
    Run the goal's search at each of the six settings.

    Parameters
    ----------
    calib : Calibration
    goals : Mapping[str, SearchGoal]
        One goal per setting label of ``fuse_settings``.
    max_workers : int
        Settings searched concurrently; each search is itself sequential.
    evaluator_factory : Optional[Callable[[Calibration, PhaseSpec], Evaluator]]
        Defaults to ``engine_evaluator``.

    Returns
    -------
    Tuple[FuseTable, Dict[str, SearchReport]]
    """
    settings = fuse_settings(calib)
    missing = sorted(set(settings) - set(goals))
    if missing:
        msg = f"Missing search goals for settings {missing}."
        raise ValueError(msg)
    factory = evaluator_factory or engine_evaluator

    def _search(label: str) -> SearchReport:
        try:
            _, report = run_search(factory(calib, settings[label]), calib.table, goals[label])
        except FuseSimError as error:
            msg = f"[{label}] {error}"
            raise type(error)(msg) from error
        logger.info(
            "%s %s -> %s after %d + %d inferences",
            label,
            goals[label],
            report.cfg,
            report.inferences_step1,
            report.inferences_step2,
        )
        return report

    labels = list(settings)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        reports = dict(zip(labels, executor.map(_search, labels)))

    entries = {
        label: TableEntry(report.cfg, report.goal, report.inferences_step1, report.inferences_step2)
        for label, report in reports.items()
    }
    table = FuseTable(calib.model, calib.calib_hash, entries)
    logger.info("Built lookup table with %d inferences in total", table.total_inferences)
    return table, reports


def lookup_config(table: FuseTable, kind: PhaseKind, n_p: Optional[int] = None) -> FreqConfig:
    """The (CPU, GPU) pin for a phase, memory left to its governor."""
    if kind == "decode":
        cfg = table.entries[f"decode-{DECODE_REPRESENTATIVE}"].cfg
    else:
        if n_p is None:
            msg = "A prefill lookup needs the prompt length."
            raise ValueError(msg)
        _, representative = bucket_prefill_length(n_p)
        cfg = table.entries[f"prefill-{representative}"].cfg
    return FreqConfig(cfg.f_cpu, cfg.f_gpu, None)


class _GoalDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: GoalKind
    value: float = Field(gt=0)


class _EntryDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    f_cpu: int
    f_gpu: int
    goal: _GoalDoc
    inferences_step1: int = Field(ge=0)
    inferences_step2: int = Field(ge=0)


class FuseTableDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: str
    calib_hash: str
    entries: Dict[str, _EntryDoc]

    @model_validator(mode="after")
    def _six_settings(self) -> "FuseTableDoc":
        if set(self.entries) != set(_expected_labels()):
            msg = f"entries must be exactly {_expected_labels()}"
            raise ValueError(msg)
        return self


def save_table(table: FuseTable, path: Union[str, Path]) -> Path:
    doc = FuseTableDoc(
        model=table.model,
        calib_hash=table.calib_hash,
        entries={
            label: _EntryDoc(
                f_cpu=entry.cfg.f_cpu,  # type: ignore[arg-type]
                f_gpu=entry.cfg.f_gpu,  # type: ignore[arg-type]
                goal=_GoalDoc(kind=entry.goal.kind, value=entry.goal.value),
                inferences_step1=entry.inferences_step1,
                inferences_step2=entry.inferences_step2,
            )
            for label, entry in ((label, table.entries[label]) for label in _expected_labels())
        },
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(doc.model_dump(mode="json"), handle, sort_keys=False)
    return path


def load_table(path: Union[str, Path], calib: Optional[Calibration] = None) -> FuseTable:
    """
    Read a lookup table document.

    When ``calib`` is given the frequencies are checked against its table and a differing
    calibration hash is logged.
    """
    path = Path(path)
    if not path.is_file():
        msg = f"Lookup table {path} does not exist."
        raise TableFileError(msg)
    with path.open("r", encoding="utf-8") as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as error:
            msg = f"Lookup table {path} is not valid YAML: {error}"
            raise TableFileError(msg) from error
    try:
        doc = FuseTableDoc.model_validate(data)
    except ValidationError as error:
        msg = f"Invalid lookup table {path}: {error}"
        raise TableFileError(msg) from error

    table = FuseTable(
        model=doc.model,
        calib_hash=doc.calib_hash,
        entries={
            label: TableEntry(
                FreqConfig(entry.f_cpu, entry.f_gpu, None),
                SearchGoal(entry.goal.kind, entry.goal.value),
                entry.inferences_step1,
                entry.inferences_step2,
            )
            for label, entry in doc.entries.items()
        },
    )
    if calib is not None:
        table.validate(calib.table)
        if table.calib_hash != calib.calib_hash:
            logger.warning("Lookup table %s was searched on calibration %s, not %s", path, table.calib_hash, calib.calib_hash)
    return table
