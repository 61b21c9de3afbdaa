"""Parametric workload and power model of GPU-offloaded LLM inference.

Each kernel costs the CPU an issue phase, the GPU an execution phase (compute plus
memory traffic) and a dispatch gap. Utilizations follow from how long each component
is busy within the kernel period, which is what couples the three frequencies.
"""

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from fusesim.exceptions import CalibrationInfeasible
from fusesim.models import (
    Anchor,
    FreqConfig,
    FrequencyTable,
    KernelTimes,
    PerfModelParams,
    PhaseKind,
    PhaseParams,
    PhaseSpec,
    PowerModelParams,
    UtilPoint,
)

logger = logging.getLogger(__name__)

MAX_RESIDUAL = 0.05
DESCENT_MAX_SWEEPS = 10_000
DESCENT_TOLERANCE = 1e-9


def _concrete(cfg: FreqConfig) -> Tuple[int, int, int]:
    if not cfg.is_pinned:
        msg = f"A steady state needs every frequency fixed, got {cfg}."
        raise ValueError(msg)
    return cfg.f_cpu, cfg.f_gpu, cfg.f_mem  # type: ignore[return-value]


def _kernel_times(cfg: FreqConfig, params: PhaseParams) -> KernelTimes:
    f_cpu, f_gpu, f_mem = _concrete(cfg)
    return KernelTimes(
        t_issue=params.w_c / f_cpu,
        t_exec=params.w_g / f_gpu + params.b_m / f_mem,
        t_gap=params.g_c / f_cpu + params.g0,
    )


def kernel_times(cfg: FreqConfig, phase: PhaseSpec, params: PhaseParams) -> KernelTimes:
    """Issue, execution and gap time of one kernel of ``phase``; ``params`` are the unscaled work terms."""
    return _kernel_times(cfg, params.scaled(phase))


def steady_state(cfg: FreqConfig, params: PhaseParams) -> UtilPoint:
    """
    Kernel period and per-component busy fractions at a fixed frequency combination.

    Parameters
    ----------
    cfg : FreqConfig
        Fully pinned combination.
    params : PhaseParams
        Work terms, already scaled to the phase (see ``PerfModelParams.for_phase``).

    Returns
    -------
    UtilPoint
        ``T = (1 - overlap)·t_issue + t_exec + t_gap`` and the utilizations over ``T``.
    """
    times = _kernel_times(cfg, params)
    period = (1.0 - params.issue_overlap) * times.t_issue + times.t_exec + times.t_gap
    t_mem = params.b_m / cfg.f_mem  # type: ignore[operator]
    return UtilPoint(
        period=period,
        u_cpu=min(1.0, times.t_issue / period),
        u_gpu=min(1.0, times.t_exec / period),
        u_mem=min(1.0, t_mem / period),
    )


def power_draw(cfg: FreqConfig, up: UtilPoint, power: PowerModelParams, table: FrequencyTable) -> float:
    """Device power in mW: idle floor plus utilization-weighted dynamic power per component."""
    total = power.p_idle
    for component, freq in cfg.items():
        util = up.util(component)
        if util > 0:
            total += util * power.component(component).at(freq / table.max(component))  # type: ignore[operator]
    return total


def component_power(cfg: FreqConfig, up: UtilPoint, power: PowerModelParams, table: FrequencyTable) -> Dict[str, float]:
    parts = {"idle": power.p_idle}
    for component, freq in cfg.items():
        parts[component] = up.util(component) * power.component(component).at(
            freq / table.max(component)  # type: ignore[operator]
        )
    return parts


def energy_per_kernel(cfg: FreqConfig, params: PhaseParams, power: PowerModelParams, table: FrequencyTable) -> float:
    up = steady_state(cfg, params)
    return power_draw(cfg, up, power, table) * up.period / 1000.0


def energy_per_token(
    cfg: FreqConfig, phase: PhaseSpec, perf: PerfModelParams, power: PowerModelParams, table: FrequencyTable
) -> float:
    """Pinned steady-state energy per token in mJ, without running the engine."""
    params = perf.for_phase(phase)
    return energy_per_kernel(cfg, params, power, table) * phase.total_kernels / phase.tokens


def _anchor_row(anchor: Anchor, g0: float) -> Tuple[List[float], float]:
    f_cpu, f_gpu, f_mem = _concrete(anchor.cfg)
    u = anchor.value
    # unknowns: (w_c, x, w_g, b_m) with x = (1 - overlap)·w_c + g_c
    if anchor.metric == "u_gpu":
        row = [0.0, u / f_cpu, (u - 1.0) / f_gpu, (u - 1.0) / f_mem]
    else:
        row = [-1.0 / f_cpu, u / f_cpu, u / f_gpu, u / f_mem]
    return row, -u * g0


def _periods(anchors: Sequence[Anchor], theta: np.ndarray, g0: float) -> np.ndarray:
    _, x, w_g, b_m = theta
    return np.array(
        [x / a.cfg.f_cpu + w_g / a.cfg.f_gpu + b_m / a.cfg.f_mem + g0 for a in anchors]  # type: ignore[operator]
    )


def _nonnegative_descent(design: np.ndarray, target: np.ndarray, start: np.ndarray) -> np.ndarray:
    theta = np.clip(start, 0.0, None)
    norms = (design**2).sum(axis=0)
    for sweep in range(DESCENT_MAX_SWEEPS):
        largest_step = 0.0
        for j in range(design.shape[1]):
            if norms[j] == 0:
                continue
            residual = design @ theta - target
            updated = max(0.0, theta[j] - float(design[:, j] @ residual) / norms[j])
            largest_step = max(largest_step, abs(updated - theta[j]) / max(1.0, abs(theta[j])))
            theta[j] = updated
        if largest_step < DESCENT_TOLERANCE:
            logger.debug("Coordinate descent converged after %d sweeps", sweep + 1)
            break
    return theta


def _solve_work(anchors: Sequence[Anchor], g0: float) -> np.ndarray:
    rows, rhs = zip(*(_anchor_row(anchor, g0) for anchor in anchors))
    design = np.array(rows, dtype=float)
    target = np.array(rhs, dtype=float)
    weights = np.ones(len(anchors))
    theta = np.zeros(4)
    # rows measure utilization error times the period, so reweight by 1/T until stable
    for _ in range(3):
        theta, *_ = np.linalg.lstsq(design * weights[:, None], target * weights, rcond=None)
        periods = _periods(anchors, theta, g0)
        if np.any(periods <= 0):
            break
        weights = 1.0 / periods
    if np.any(theta < 0):
        logger.warning("Direct solve produced negative work %s; falling back to coordinate descent", theta)
        theta = _nonnegative_descent(design * weights[:, None], target * weights, theta)
    return theta


def _split_gap(w_c: float, x: float) -> Tuple[float, float]:
    """Return (g_c, issue_overlap) reproducing ``x = (1 - overlap)·w_c + g_c``."""
    if w_c <= 0 or x >= w_c:
        return x - max(w_c, 0.0), 0.0
    return 0.0, 1.0 - x / w_c


def anchor_residuals(anchors: Sequence[Anchor], perf: PerfModelParams) -> List[float]:
    residuals = []
    for anchor in anchors:
        params = perf.prefill if anchor.phase == "prefill" else perf.decode
        up = steady_state(anchor.cfg, params)
        residuals.append(getattr(up, anchor.metric) - anchor.value)
    return residuals


def calibrate_from_targets(anchors: Sequence[Anchor], template: PerfModelParams) -> PerfModelParams:
    """
    Fit the per-phase work terms to observed utilizations.

    Parameters
    ----------
    anchors : Sequence[Anchor]
        At least four anchors per phase kind; prefill anchors refer to the template's
        reference prompt length.
    template : PerfModelParams
        Supplies the fixed terms (``g0``, kernels per token, prefill scaling); its work terms
        are replaced.

    Returns
    -------
    PerfModelParams
        Parameters minimizing the squared utilization residuals.

    Raises
    ------
    CalibrationInfeasible
        If a phase has fewer than four anchors or the best fit misses an anchor by more
        than 0.05.
    """
    fitted: Dict[PhaseKind, PhaseParams] = {}
    for kind in ("decode", "prefill"):
        base: PhaseParams = getattr(template, kind)
        phase_anchors = [a for a in anchors if a.phase == kind]
        if len(phase_anchors) < 4:  # noqa: PLR2004
            msg = f"Calibrating {kind} needs at least 4 anchors, got {len(phase_anchors)}."
            raise CalibrationInfeasible(msg)
        w_c, x, w_g, b_m = (float(v) for v in _solve_work(phase_anchors, base.g0))
        if w_g <= 0:
            msg = f"No positive GPU work reproduces the {kind} anchors."
            raise CalibrationInfeasible(msg)
        g_c, overlap = _split_gap(w_c, x)
        fitted[kind] = PhaseParams(
            w_c=w_c,
            w_g=w_g,
            b_m=b_m,
            g_c=g_c,
            g0=base.g0,
            issue_overlap=overlap,
            kernels_per_token=base.kernels_per_token,
            n_ref=base.n_ref,
            cpu_work_exponent=base.cpu_work_exponent,
        )
        logger.debug("Calibrated %s work: %s", kind, fitted[kind])

    perf = PerfModelParams(decode=fitted["decode"], prefill=fitted["prefill"])
    worst = max(abs(r) for r in anchor_residuals(anchors, perf))
    if worst > MAX_RESIDUAL:
        msg = f"Best fit misses an anchor by {worst:.3f} (> {MAX_RESIDUAL})."
        raise CalibrationInfeasible(msg)
    return perf
