from fusesim.__about__ import __version__
from fusesim.calibration import Calibration, load_calibration
from fusesim.engine import Scenario, ScheduleEvent, SimTrace, run_phase, run_scenario
from fusesim.main import FuseSim
from fusesim.models import FreqConfig, PhaseSpec, ProfileEntry, Request
from fusesim.search import FuseTable, SearchGoal

__all__ = [
    "FuseSim",
    "__version__",
    "Calibration",
    "load_calibration",
    "FreqConfig",
    "PhaseSpec",
    "ProfileEntry",
    "Request",
    "Scenario",
    "ScheduleEvent",
    "SimTrace",
    "run_phase",
    "run_scenario",
    "FuseTable",
    "SearchGoal",
]
