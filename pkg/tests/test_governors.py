import numpy as np
import pytest

from fusesim.exceptions import InvalidFrequency
from fusesim.governors import (
    EasState,
    GovernorSet,
    InteractiveMemState,
    Pin,
    QuickstepState,
    eas_select,
    eas_tick,
    interactive_mem_step,
    make_pin,
    quickstep_step,
)
from fusesim.models import PIXEL7_CPU, PIXEL7_GPU, PIXEL7_MEM, EasParams, FreqConfig, InteractiveParams, QuickstepParams

UNIFORM = QuickstepParams.uniform(PIXEL7_GPU)


@pytest.mark.parametrize("util, expected", [(0.95, 762), (0.40, 572), (0.75, 701)])
def test_quickstep_step(util, expected):
    state = QuickstepState(701, UNIFORM)
    assert quickstep_step(state, util) == expected
    assert state.current_freq == expected


def test_quickstep_clamps_at_the_ends():
    assert quickstep_step(QuickstepState(848, UNIFORM), 1.0) == 848
    assert quickstep_step(QuickstepState(151, UNIFORM), 0.0) == 151


def test_quickstep_rejects_bad_input():
    with pytest.raises(ValueError):
        quickstep_step(QuickstepState(701, UNIFORM), 1.2)
    with pytest.raises(InvalidFrequency):
        quickstep_step(QuickstepState(700, UNIFORM), 0.5)


def test_quickstep_moves_at_most_one_step():
    rng = np.random.default_rng(7)
    for _ in range(500):
        start = int(rng.choice(PIXEL7_GPU))
        state = QuickstepState(start, UNIFORM)
        new = quickstep_step(state, float(rng.uniform(0, 1)))
        assert new in PIXEL7_GPU
        assert abs(PIXEL7_GPU.index(new) - PIXEL7_GPU.index(start)) <= 1


def test_eas_tick_decay():
    params = EasParams()
    state = EasState(500, params, load=100.0)
    assert eas_tick(state, 0.0, 500, 2850) == pytest.approx(100.0 * params.decay)
    assert state.load == pytest.approx(97.857, abs=1e-3)


def test_eas_tick_single_full_tick():
    state = EasState(2850, EasParams(), load=0.0)
    assert eas_tick(state, 1.0, 2850, 2850) == pytest.approx(21.94, abs=0.01)


def test_eas_tick_fixed_point():
    state = EasState(2850, EasParams(), load=0.0)
    for _ in range(2000):
        eas_tick(state, 1.0, 2850, 2850)
    assert state.load == pytest.approx(1024.0, abs=1e-3)


def test_eas_load_is_frequency_invariant():
    fast, slow = EasState(2850, EasParams()), EasState(1426, EasParams())
    eas_tick(fast, 0.5, 2850, 2850)
    eas_tick(slow, 1.0, 1426, 2850)
    assert slow.load == pytest.approx(fast.load, rel=1e-3)


@pytest.mark.parametrize("load, expected", [(300.0, 1106), (0.0, 500), (1024.0, 2850)])
def test_eas_select(load, expected):
    assert eas_select(EasState(2850, EasParams(), load=load), PIXEL7_CPU) == expected


def test_eas_select_is_monotone_in_load():
    selected = [eas_select(EasState(500, EasParams(), load=load), PIXEL7_CPU) for load in np.linspace(0, 1024, 200)]
    assert selected == sorted(selected)


@pytest.mark.parametrize("current, util, expected", [(1014, 0.9, 1352), (3172, 1.0, 3172), (1014, 0.35, 546)])
def test_interactive_mem_step(current, util, expected):
    state = InteractiveMemState(current, InteractiveParams(target_load=0.7))
    assert interactive_mem_step(state, util, PIXEL7_MEM) == expected
    assert state.current_freq == expected


def test_make_pin():
    assert make_pin(848, PIXEL7_GPU) == Pin(848, 848)
    assert make_pin(151, PIXEL7_GPU).fixed
    with pytest.raises(InvalidFrequency):
        make_pin(999, PIXEL7_GPU)


def test_eas_tick_seeds_from_the_first_sample():
    state = EasState(2850, EasParams())
    assert state.load is None
    assert eas_tick(state, 0.5, 1426, 2850) == pytest.approx(1024 * 0.5 * 1426 / 2850)
    assert eas_select(EasState(2850, EasParams()), PIXEL7_CPU) == 500


def test_eas_tick_span_equals_repeated_ticks():
    one_by_one, spanned = EasState(2850, EasParams(), load=800.0), EasState(2850, EasParams(), load=800.0)
    for _ in range(20):
        eas_tick(one_by_one, 0.3, 1106, 2850)
    eas_tick(spanned, 0.3, 1106, 2850, ticks=20)
    assert spanned.load == pytest.approx(one_by_one.load, rel=1e-12)

    with pytest.raises(ValueError):
        eas_tick(spanned, 0.3, 1106, 2850, ticks=0)


def test_make_pin_bounds():
    pin = make_pin(471, PIXEL7_GPU, high=701)
    assert not pin.fixed
    assert [pin.clamp(f) for f in (151, 572, 848)] == [471, 572, 701]
    assert str(pin) == "pin(471-701)"
    with pytest.raises(ValueError):
        Pin(701, 471)
    with pytest.raises(InvalidFrequency):
        make_pin(471, PIXEL7_GPU, high=700)


def test_governor_set_pins_and_releases(calib):
    govs = GovernorSet.default(calib.table, calib.governors, pins=FreqConfig(None, 471, None))
    assert govs.frequencies() == FreqConfig(2850, 471, 3172)
    assert govs.is_pinned("gpu")
    assert not govs.all_pinned
    assert govs.describe() == "cpu=eas gpu=pin(471) mem=interactive"

    govs.apply("gpu", "default")
    assert not govs.is_pinned("gpu")
    assert govs.gpu.current_freq == 471
    assert govs.describe() == "cpu=eas gpu=quickstep mem=interactive"

    with pytest.raises(InvalidFrequency):
        govs.apply("mem", 1000)


def test_pinned_governors_keep_running(calib):
    govs = GovernorSet.default(calib.table, calib.governors, pins=FreqConfig(2188, 848, None))
    # EAS wants a low frequency for this load but stays inside the pin
    assert govs.tick_cpu(0.1, 2188) == 2188
    assert govs.cpu.load == pytest.approx(1024 * 0.1 * 2188 / 2850)
    assert govs.step_gpu(0.0) == 848
    assert govs.gpu.current_freq == 848

    govs.apply("cpu", "default")
    assert govs.tick_cpu(0.1, 2188) == 500


def test_bounded_governor_moves_inside_its_range(calib):
    govs = GovernorSet.default(calib.table, calib.governors)
    govs.bound("gpu", make_pin(471, calib.table.gpu, high=701))
    assert govs.gpu.current_freq == 701
    assert not govs.is_pinned("gpu")
    assert govs.step_gpu(1.0) == 701
    seen = {govs.step_gpu(0.0) for _ in range(12)}
    assert seen == {572, 471}


@pytest.mark.parametrize("seed", range(5))
def test_governor_outputs_stay_in_the_table(calib, seed):
    rng = np.random.default_rng(seed)
    govs = GovernorSet.default(calib.table, calib.governors)
    for _ in range(400):
        f_cpu = govs.tick_cpu(float(rng.uniform(0, 1)), govs.cpu.current_freq, int(rng.integers(1, 40)))
        f_mem = govs.step_mem(float(rng.uniform(0, 1)))
        f_gpu = govs.step_gpu(float(rng.uniform(0, 1)))
        assert f_cpu in calib.table.cpu
        assert f_mem in calib.table.mem
        assert f_gpu in calib.table.gpu


def test_initial_frequencies_must_be_available(calib):
    with pytest.raises(InvalidFrequency):
        GovernorSet.default(calib.table, calib.governors, initial=FreqConfig(2000, None, None))
