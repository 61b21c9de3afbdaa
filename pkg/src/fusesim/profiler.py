import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd
from tqdm import tqdm

from fusesim.calibration import Calibration
from fusesim.engine import run_phase
from fusesim.exceptions import CalibrationMismatch, InfeasibleConstraint, ProfileSchemaError
from fusesim.governors import GovernorSet
from fusesim.metrics import phase_metrics
from fusesim.models import FreqConfig, FrequencyTable, PhaseSpec, ProfileEntry

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = [
    "phase_kind",
    "n_p",
    "n_d",
    "f_cpu",
    "f_gpu",
    "f_mem_or_default",
    "latency_ms",
    "energy_mj_per_token",
    "avg_power_mw",
    "calib_hash",
    "kernels_per_token",
]
DEFAULT_MARK = "default"

ProfileKey = Tuple[Tuple[str, int, int], Tuple[Optional[int], Optional[int], Optional[int]]]


@dataclass(frozen=True)
class SweepGrid:
    """Frequencies to sweep per component; ``None`` in a list means "leave to the default governor"."""

    cpu: Tuple[Optional[int], ...]
    gpu: Tuple[Optional[int], ...]
    mem: Tuple[Optional[int], ...]

    def __post_init__(self) -> None:
        if not (self.cpu and self.gpu and self.mem):
            msg = "Every component of a sweep grid needs at least one entry."
            raise ValueError(msg)

    @classmethod
    def full(cls, table: FrequencyTable) -> "SweepGrid":
        return cls(tuple(table.cpu), tuple(table.gpu), tuple(table.mem))

    @classmethod
    def fuse_space(cls, table: FrequencyTable) -> "SweepGrid":
        """CPU × GPU with memory under its governor."""
        return cls(tuple(table.cpu), tuple(table.gpu), (None,))

    def configs(self) -> Iterator[FreqConfig]:
        for f_cpu, f_gpu, f_mem in itertools.product(self.cpu, self.gpu, self.mem):
            yield FreqConfig(f_cpu, f_gpu, f_mem)

    def __len__(self) -> int:
        return len(self.cpu) * len(self.gpu) * len(self.mem)


@dataclass
class ProfileSet:
    """Measurements keyed by (phase, configuration), all from one calibration."""

    calib_hash: str
    _entries: Dict[ProfileKey, ProfileEntry] = field(default_factory=dict)

    @classmethod
    def of(cls, calib_hash: str, entries: Iterable[ProfileEntry]) -> "ProfileSet":
        ps = cls(calib_hash)
        for entry in entries:
            ps.add(entry)
        return ps

    def add(self, entry: ProfileEntry) -> None:
        if entry.key in self._entries:
            msg = f"Duplicate profile entry for {entry.cfg} in {entry.phase.key}"
            raise ValueError(msg)
        self._entries[entry.key] = entry

    @property
    def entries(self) -> List[ProfileEntry]:
        return [self._entries[key] for key in sorted(self._entries, key=_sortable)]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ProfileEntry]:
        return iter(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProfileSet):
            return NotImplemented
        return self.calib_hash == other.calib_hash and self.entries == other.entries

    def for_phase(self, phase: PhaseSpec) -> "ProfileSet":
        return ProfileSet.of(self.calib_hash, (e for e in self.entries if e.phase.key == phase.key))

    def merge(self, other: "ProfileSet") -> "ProfileSet":
        if other.calib_hash != self.calib_hash:
            msg = f"Cannot merge profiles from calibrations {self.calib_hash} and {other.calib_hash}"
            raise CalibrationMismatch(msg)
        return ProfileSet.of(self.calib_hash, itertools.chain(self.entries, other.entries))

    def to_frame(self) -> pd.DataFrame:
        def _fmt(freq: Optional[int]) -> Union[int, str]:
            return DEFAULT_MARK if freq is None else freq

        rows = [
            (
                e.phase.kind,
                e.phase.prompt_tokens,
                e.phase.decode_tokens,
                _fmt(e.cfg.f_cpu),
                _fmt(e.cfg.f_gpu),
                _fmt(e.cfg.f_mem),
                e.latency,
                e.energy_per_token,
                e.avg_power,
                self.calib_hash,
                e.phase.kernels_per_token,
            )
            for e in self.entries
        ]
        return pd.DataFrame(rows, columns=PROFILE_COLUMNS)


def _sortable(key: ProfileKey) -> Tuple:
    phase_key, freqs = key
    return (phase_key, tuple(-1 if f is None else f for f in freqs))


def evaluate(calib: Calibration, cfg: FreqConfig, phase: PhaseSpec) -> ProfileEntry:
    """
    Simulate ``phase`` once with the components of ``cfg`` pinned and the rest under their default governors.

    Governors start fresh, so the entry depends only on (calibration, cfg, phase).
    """
    govs = GovernorSet.default(calib.table, calib.governors, pins=cfg)
    try:
        _, result = run_phase(calib, govs, phase, record=False)
    except Exception as error:
        msg = f"{error} [cfg={cfg}, phase={phase.kind}:{phase.tokens}]"
        raise type(error)(msg) from error
    metrics = phase_metrics(result)
    return ProfileEntry(
        cfg=cfg,
        phase=phase,
        latency=metrics.latency,
        energy_per_token=metrics.energy_per_token,
        avg_power=metrics.avg_power,
    )


def sweep(
    calib: Calibration,
    phase: PhaseSpec,
    grid: Optional[SweepGrid] = None,
    max_workers: int = 1,
    verbose: Optional[bool] = None,
) -> ProfileSet:
    """
    Profile every configuration of ``grid`` (the full frequency table by default).

    Parameters
    ----------
    calib : Calibration
    phase : PhaseSpec
    grid : Optional[SweepGrid]
        Defaults to ``SweepGrid.full(calib.table)``, 2808 combinations on the Pixel 7 table.
    max_workers : int
        Threads evaluating configurations; results are identical for any value.
    verbose : Optional[bool]
        Display tqdm progress bar.

    Returns
    -------
    ProfileSet
    """
    grid = grid or SweepGrid.full(calib.table)
    configs = [calib.table.validate(cfg) for cfg in grid.configs()]
    disable = not verbose if verbose is not None else None
    logger.info("Sweeping %d configurations for %s:%d", len(configs), phase.kind, phase.tokens)

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        entries = list(
            tqdm(
                executor.map(lambda cfg: evaluate(calib, cfg, phase), configs),
                total=len(configs),
                disable=disable,
                desc=f"Sweeping {phase.kind}",
            )
        )
    return ProfileSet.of(calib.calib_hash, entries)


def pin_opt(
    entries: Iterable[ProfileEntry],
    energy_budget: Optional[float] = None,
    latency_target: Optional[float] = None,
) -> ProfileEntry:
    """
    The brute-force optimum under one constraint.

    With ``energy_budget`` returns the lowest-latency entry whose energy fits the budget;
    with ``latency_target`` the lowest-energy entry meeting the target. Ties go to lower
    energy, then lower GPU, CPU and memory frequency.

    Raises
    ------
    InfeasibleConstraint
        If no entry satisfies the constraint.
    """
    if (energy_budget is None) == (latency_target is None):
        msg = "Pass exactly one of energy_budget or latency_target."
        raise ValueError(msg)
    entries = list(entries)
    if not entries:
        msg = "pin_opt needs at least one profile entry."
        raise ValueError(msg)

    if energy_budget is not None:
        feasible = [e for e in entries if e.energy_per_token <= energy_budget]
        key = lambda e: (e.latency, e.energy_per_token, *e.cfg.sort_key())  # noqa: E731
        constraint = f"energy budget {energy_budget:.3f} mJ"
    else:
        feasible = [e for e in entries if e.latency <= latency_target]  # type: ignore[operator]
        key = lambda e: (e.energy_per_token, *e.cfg.sort_key())  # noqa: E731
        constraint = f"latency target {latency_target:.3f} ms"
    if not feasible:
        msg = f"No profiled configuration meets the {constraint}."
        raise InfeasibleConstraint(msg)
    return min(feasible, key=key)


def pareto(ps: Union[ProfileSet, Sequence[ProfileEntry]]) -> List[ProfileEntry]:
    """Entries not dominated in (latency, energy per token); exact duplicates are all kept."""
    ordered = sorted(ps, key=lambda e: (e.latency, e.energy_per_token, *e.cfg.sort_key()))
    front: List[ProfileEntry] = []
    best_energy = math.inf
    for entry in ordered:
        if entry.energy_per_token < best_energy:
            front.append(entry)
            best_energy = entry.energy_per_token
        elif front and (entry.latency, entry.energy_per_token) == (front[-1].latency, front[-1].energy_per_token):
            front.append(entry)
    return front


def save_profiles(ps: ProfileSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ps.to_frame().to_csv(path, index=False)
    return path


def _parse_freq(value: object) -> Optional[int]:
    return None if str(value) == DEFAULT_MARK else int(value)  # type: ignore[call-overload]


def load_profiles(path: Union[str, Path], expected_hash: Optional[str] = None) -> ProfileSet:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"f_cpu": str, "f_gpu": str, "f_mem_or_default": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError as error:
        msg = f"Profile file {path} is empty."
        raise ProfileSchemaError(msg) from error
    if list(frame.columns) != PROFILE_COLUMNS:
        msg = f"Profile file {path} has columns {list(frame.columns)}, expected {PROFILE_COLUMNS}."
        raise ProfileSchemaError(msg)
    if frame.empty:
        msg = f"Profile file {path} holds no entries."
        raise ProfileSchemaError(msg)
    hashes = sorted(set(frame["calib_hash"].astype(str)))
    if len(hashes) > 1:
        msg = f"Profile file {path} mixes calibrations {hashes}."
        raise CalibrationMismatch(msg)
    calib_hash = hashes[0]
    if expected_hash is not None and calib_hash != expected_hash:
        logger.warning("Profiles in %s were measured with calibration %s, not %s", path, calib_hash, expected_hash)

    entries = []
    for row in frame.itertuples(index=False):
        if row.phase_kind == "prefill":
            phase = PhaseSpec.prefill(int(row.n_p), int(row.kernels_per_token))
        else:
            phase = PhaseSpec.decode(int(row.n_d), int(row.kernels_per_token))
        cfg = FreqConfig(_parse_freq(row.f_cpu), _parse_freq(row.f_gpu), _parse_freq(row.f_mem_or_default))
        entries.append(
            ProfileEntry(
                cfg=cfg,
                phase=phase,
                latency=float(row.latency_ms),
                energy_per_token=float(row.energy_mj_per_token),
                avg_power=float(row.avg_power_mw),
            )
        )
    return ProfileSet.of(calib_hash, entries)
