"""Comparisons of default governors against pinned frequencies and against searched tables."""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Mapping, Optional

import pandas as pd

from fusesim.calibration import Calibration
from fusesim.engine import run_phase
from fusesim.exceptions import InfeasibleConstraint
from fusesim.governors import GovernorSet
from fusesim.metrics import phase_metrics
from fusesim.models import Component, FreqConfig, PhaseSpec, ProfileEntry
from fusesim.profiler import evaluate, pin_opt

logger = logging.getLogger(__name__)


def _reduction(base: float, other: float) -> float:
    return 1.0 - other / base


def _optimum(entries: Iterable[ProfileEntry], **constraint: float) -> Optional[ProfileEntry]:
    try:
        return pin_opt(entries, **constraint)
    except InfeasibleConstraint:
        return None


@dataclass(frozen=True)
class IsolationReport:
    """
    One component under its governor against the same component pinned, the others fixed.

    Attributes
    ----------
    component : Component
    governor : ProfileEntry
        The run with ``component`` under its default governor.
    effective_freq : float
        Time-weighted frequency the governor ran ``component`` at, MHz.
    pinned : List[ProfileEntry]
        One entry per available frequency of ``component``.
    faster : Optional[ProfileEntry]
        Lowest-latency pin within the governor's energy per token.
    cheaper : Optional[ProfileEntry]
        Lowest-energy pin within the governor's latency.
    """

    component: Component
    governor: ProfileEntry
    effective_freq: float
    pinned: List[ProfileEntry]
    faster: Optional[ProfileEntry]
    cheaper: Optional[ProfileEntry]

    @property
    def latency_reduction(self) -> float:
        return _reduction(self.governor.latency, self.faster.latency) if self.faster else 0.0

    @property
    def energy_reduction(self) -> float:
        return _reduction(self.governor.energy_per_token, self.cheaper.energy_per_token) if self.cheaper else 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = [("governor", self.effective_freq, self.governor.latency, self.governor.energy_per_token)]
        rows += [
            ("pin", float(getattr(e.cfg, f"f_{self.component}")), e.latency, e.energy_per_token) for e in self.pinned
        ]
        return pd.DataFrame(rows, columns=["mode", "freq_mhz", "latency_ms", "energy_mj_per_token"])


def isolation_study(calib: Calibration, phase: PhaseSpec, component: Component, fixed: FreqConfig) -> IsolationReport:
    """
    Run ``component``'s governor with the other two components pinned at ``fixed``, then pin it at
    every table frequency.
    """
    others = [c for c, f in fixed.items() if c != component and f is None]
    if others:
        msg = f"Isolating the {component} needs fixed frequencies for {others}."
        raise ValueError(msg)
    governed = replace(fixed, **{f"f_{component}": None})
    calib.table.validate(governed)

    govs = GovernorSet.default(calib.table, calib.governors, pins=governed)
    _, result = run_phase(calib, govs, phase, record=False)
    metrics = phase_metrics(result)
    governor = ProfileEntry(governed, phase, metrics.latency, metrics.energy_per_token, metrics.avg_power)

    pinned = [
        evaluate(calib, replace(governed, **{f"f_{component}": freq}), phase) for freq in calib.table.freqs(component)
    ]
    report = IsolationReport(
        component=component,
        governor=governor,
        effective_freq=metrics.effective_freq[component],
        pinned=pinned,
        faster=_optimum(pinned, energy_budget=governor.energy_per_token),
        cheaper=_optimum(pinned, latency_target=governor.latency),
    )
    logger.info(
        "%s governor at %.0f MHz effective: pinning gains %.1f%% latency or %.1f%% energy",
        component,
        report.effective_freq,
        100 * report.latency_reduction,
        100 * report.energy_reduction,
    )
    return report


@dataclass(frozen=True)
class BaselineComparison:
    """Default governors against the brute-force pinned optimum at the governors' own energy and latency."""

    governor: ProfileEntry
    faster: Optional[ProfileEntry]
    cheaper: Optional[ProfileEntry]

    @property
    def latency_reduction(self) -> float:
        return _reduction(self.governor.latency, self.faster.latency) if self.faster else 0.0

    @property
    def energy_reduction(self) -> float:
        return _reduction(self.governor.energy_per_token, self.cheaper.energy_per_token) if self.cheaper else 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = [("gov", str(self.governor.cfg), self.governor.latency, self.governor.energy_per_token)]
        for label, entry in (("pin-opt-latency", self.faster), ("pin-opt-energy", self.cheaper)):
            if entry is not None:
                rows.append((label, str(entry.cfg), entry.latency, entry.energy_per_token))
        return pd.DataFrame(rows, columns=["mode", "cfg", "latency_ms", "energy_mj_per_token"])


def gov_vs_pin(calib: Calibration, phase: PhaseSpec, profiles: Iterable[ProfileEntry]) -> BaselineComparison:
    entries = [e for e in profiles if e.phase.key == phase.key]
    if not entries:
        msg = f"No profiles for {phase.kind}:{phase.tokens} to compare against."
        raise ValueError(msg)
    governor = evaluate(calib, FreqConfig(None, None, None), phase)
    return BaselineComparison(
        governor=governor,
        faster=_optimum(entries, energy_budget=governor.energy_per_token),
        cheaper=_optimum(entries, latency_target=governor.latency),
    )


def setting_gains(gov: Mapping[str, ProfileEntry], searched: Mapping[str, ProfileEntry]) -> pd.DataFrame:
    """Latency and energy-per-token ratios of the searched configuration over the governors, per setting."""
    if set(gov) != set(searched):
        msg = f"Settings differ: {sorted(gov)} vs {sorted(searched)}."
        raise ValueError(msg)
    rows = []
    for label in gov:
        base, other = gov[label], searched[label]
        rows.append(
            (
                label,
                str(other.cfg),
                base.latency,
                other.latency,
                other.latency / base.latency,
                base.energy_per_token,
                other.energy_per_token,
                other.energy_per_token / base.energy_per_token,
            )
        )
    return pd.DataFrame(
        rows,
        columns=[
            "setting",
            "cfg",
            "gov_latency_ms",
            "searched_latency_ms",
            "latency_ratio",
            "gov_energy_mj",
            "searched_energy_mj",
            "energy_ratio",
        ],
    )
