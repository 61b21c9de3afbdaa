import os
from dataclasses import replace

import pytest

# import all the env variables in .env and add them to the environment
from dotenv import load_dotenv

from fusesim.calibration import Calibration, load_calibration
from fusesim.main import FuseSim
from fusesim.models import (
    ComponentPower,
    EngineParams,
    FrequencyTable,
    GovernorParams,
    PerfModelParams,
    PhaseParams,
    PowerModelParams,
    QuickstepParams,
)

load_dotenv()


@pytest.fixture(scope="session")
def calib_path():
    return os.getenv("FUSESIM_CALIB")


@pytest.fixture(scope="session")
def sim(calib_path) -> FuseSim:
    return FuseSim(calib_path)


@pytest.fixture(scope="session")
def calib() -> Calibration:
    """The packaged Pixel 7 calibration, whatever FUSESIM_CALIB says."""
    return load_calibration()


@pytest.fixture(scope="session")
def small_calib() -> Calibration:
    """Three frequencies per component and round work terms."""
    table = FrequencyTable(cpu=(1000, 2000, 3000), gpu=(200, 400, 800), mem=(500, 1000, 2000))
    phase = PhaseParams(w_c=1500.0, w_g=800.0, b_m=1000.0, g_c=0.0, g0=0.5, kernels_per_token=10)
    return Calibration(
        model="small",
        table=table,
        perf=PerfModelParams(decode=phase, prefill=replace(phase, w_g=8000.0, n_ref=32)),
        power=PowerModelParams(
            p_idle=500.0,
            cpu=ComponentPower(2000.0, 300.0, 3.0),
            gpu=ComponentPower(1500.0, 300.0, 3.0),
            mem=ComponentPower(1000.0, 200.0, 2.0),
        ),
        governors=GovernorParams(quickstep=QuickstepParams.uniform(table.gpu)),
        engine=EngineParams(),
    )
