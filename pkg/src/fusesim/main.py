import os
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from fusesim.analysis import BaselineComparison, IsolationReport, gov_vs_pin, isolation_study
from fusesim.calibration import Calibration, load_calibration
from fusesim.engine import Scenario, SimTrace, run_phase, run_scenario
from fusesim.exceptions import ConfigurationError
from fusesim.governors import GovernorSet
from fusesim.models import Component, FreqConfig, PhaseResult, PhaseSpec, ProfileEntry, Request
from fusesim.profiler import ProfileSet, SweepGrid, sweep
from fusesim.replay import Policy, ReplayReport, replay
from fusesim.search import (
    FuseTable,
    SearchGoal,
    SearchReport,
    build_config_table,
    engine_evaluator,
    fuse_settings,
    gov_baseline,
    gov_goals,
    run_search,
)

CALIB_ENV = "FUSESIM_CALIB"


class FuseSim:
    def __init__(self, calib_path: Optional[Union[str, Path]] = None, calibration: Optional[Calibration] = None):
        """
        Bind a calibration to every simulator operation.

        Parameters
        ----------
        calib_path : Optional[Union[str, Path]], optional
            Calibration YAML document. If not provided, the environment variable
            'FUSESIM_CALIB' is used, and the packaged Pixel 7 / TinyLlama calibration
            when that is unset too.
        calibration : Optional[Calibration], optional
            An already loaded calibration; takes precedence over any path.

        Raises
        ------
        ConfigurationError
            If the path does not exist or the document fails validation.
        """
        if calibration is not None:
            self.calib = calibration
            return
        if calib_path is None:
            calib_path = os.environ.get(CALIB_ENV)
            if calib_path is not None and not Path(calib_path).is_file():
                msg = (
                    f"The '{CALIB_ENV}' environment variable points to {calib_path}, which does not exist. "
                    "Unset it to use the packaged calibration."
                )
                raise ConfigurationError(msg)
        self.calib = load_calibration(calib_path)

    @property
    def calib_hash(self) -> str:
        return self.calib.calib_hash

    def governors(self, pins: Optional[FreqConfig] = None) -> GovernorSet:
        """Fresh default governors, with ``pins`` applied."""
        return GovernorSet.default(self.calib.table, self.calib.governors, pins=pins)

    def run_phase(
        self, phase: PhaseSpec, pins: Optional[FreqConfig] = None, record: bool = True
    ) -> Tuple[SimTrace, PhaseResult]:
        return run_phase(self.calib, self.governors(pins), phase, record=record)

    def run_scenario(self, scenario: Scenario) -> SimTrace:
        return run_scenario(self.calib, scenario)

    def sweep(
        self, phase: PhaseSpec, grid: Optional[SweepGrid] = None, max_workers: int = 1, verbose: Optional[bool] = None
    ) -> ProfileSet:
        return sweep(self.calib, phase, grid, max_workers=max_workers, verbose=verbose)

    def search(self, phase: PhaseSpec, goal: SearchGoal) -> Tuple[FreqConfig, SearchReport]:
        return run_search(engine_evaluator(self.calib, phase), self.calib.table, goal)

    def gov_baseline(self) -> Dict[str, ProfileEntry]:
        return gov_baseline(self.calib, fuse_settings(self.calib))

    def build_table(
        self, kind: str, goals: Optional[Mapping[str, SearchGoal]] = None, max_workers: int = 1
    ) -> Tuple[FuseTable, Dict[str, SearchReport]]:
        """Search all six settings; goals default to the default governors' own energy or latency."""
        goals = goals or gov_goals(self.calib, kind)  # type: ignore[arg-type]
        return build_config_table(self.calib, goals, max_workers=max_workers)

    def replay(
        self, policy: Policy, requests: Sequence[Request], keep_traces: bool = False, verbose: Optional[bool] = None
    ) -> ReplayReport:
        return replay(self.calib, policy, requests, keep_traces=keep_traces, verbose=verbose)

    def isolate(self, phase: PhaseSpec, component: Component, fixed: FreqConfig) -> IsolationReport:
        return isolation_study(self.calib, phase, component, fixed)

    def gov_vs_pin(self, phase: PhaseSpec, profiles: ProfileSet) -> BaselineComparison:
        return gov_vs_pin(self.calib, phase, profiles)

    def settings(self) -> List[PhaseSpec]:
        return list(fuse_settings(self.calib).values())
