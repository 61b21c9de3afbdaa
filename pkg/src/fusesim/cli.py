"""Command-line driver: every command writes its outputs and a ``manifest.json`` into ``--out``."""

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd

from fusesim.__about__ import __version__
from fusesim.analysis import gov_vs_pin, isolation_study, setting_gains
from fusesim.calibration import Calibration
from fusesim.engine import run_phase, run_scenario, spiral_scenario
from fusesim.exceptions import (
    CalibrationInfeasible,
    CalibrationMismatch,
    ConfigurationError,
    FuseSimError,
    InfeasibleConstraint,
    NonTermination,
)
from fusesim.governors import GovernorSet
from fusesim.main import FuseSim
from fusesim.metrics import phase_metrics
from fusesim.models import FreqConfig, PhaseSpec
from fusesim.profiler import SweepGrid, evaluate, load_profiles, pareto, save_profiles, sweep
from fusesim.replay import ReplayReport, compare_reports, load_requests, replay, save_requests, synthesize_requests
from fusesim.search import (
    SearchGoal,
    build_config_table,
    engine_evaluator,
    gov_baseline,
    gov_goals,
    load_table,
    oracle_check,
    run_search,
    save_table,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SIMULATION = 3
EXIT_INFEASIBLE = 4
EXIT_FILE = 5

MANIFEST = "manifest.json"
# options taking a path; manifests store them absolute
PATH_OPTIONS = ("--calib", "--out", "--requests", "--table", "--profiles", "--base", "--other")


@dataclass
class RunManifest:
    """
    Provenance of one command run.

    Attributes
    ----------
    command : str
    argv : List[str]
        Arguments after the program name; re-running them reproduces the outputs.
    arguments : Dict[str, Any]
        The parsed options.
    calib_hash : str
    seed : Optional[int]
    artifacts : List[str]
        Output files, relative to the output directory.
    wall_clock_s : float
    version : str
    """

    command: str
    argv: List[str]
    arguments: Dict[str, Any]
    calib_hash: str
    seed: Optional[int] = None
    artifacts: List[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    version: str = __version__

    def save(self, out: Path) -> Path:
        path = out / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**data)
        except (OSError, ValueError, TypeError) as error:
            msg = f"Cannot read run manifest {path}: {error}"
            raise ConfigurationError(msg) from error


class _Run:
    """Output directory and artifact list of the command being executed."""

    def __init__(self, out: Path) -> None:
        self.out = out
        self.artifacts: List[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.path(name)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return path

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.path(name)
        frame.to_csv(path, index=False)
        return path


def _freq(text: str) -> Optional[int]:
    if text == "default":
        return None
    try:
        return int(text)
    except ValueError as error:
        msg = f"expected a frequency in MHz or 'default', got {text!r}"
        raise argparse.ArgumentTypeError(msg) from error


def _freq_list(text: str) -> List[Optional[int]]:
    return [_freq(part.strip()) for part in text.split(",") if part.strip()]


def _phase(args: argparse.Namespace, calib: Calibration) -> PhaseSpec:
    if args.phase == "prefill":
        return PhaseSpec.prefill(args.np, calib.perf.prefill.kernels_per_token)
    return PhaseSpec.decode(args.nd, calib.perf.decode.kernels_per_token)


def _pins(args: argparse.Namespace) -> FreqConfig:
    return FreqConfig(args.pin_cpu, args.pin_gpu, args.pin_mem)


def _entry_dict(entry) -> Dict[str, Any]:
    return {
        "f_cpu": entry.cfg.f_cpu,
        "f_gpu": entry.cfg.f_gpu,
        "f_mem": entry.cfg.f_mem,
        "latency_ms": entry.latency,
        "energy_mj_per_token": entry.energy_per_token,
        "avg_power_mw": entry.avg_power,
    }


def cmd_simulate(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    phase = _phase(args, calib)
    govs = GovernorSet.default(calib.table, calib.governors, pins=calib.table.validate(_pins(args)))
    trace, result = run_phase(calib, govs, phase)
    metrics = phase_metrics(result)
    trace.to_csv(run.path("trace.csv"))
    run.write_json(
        "metrics.json",
        {
            "phase": phase.kind,
            "tokens": phase.tokens,
            "governors": govs.describe(),
            "duration_ms": result.duration,
            "latency_ms": metrics.latency,
            "energy_mj_per_token": metrics.energy_per_token,
            "avg_power_mw": metrics.avg_power,
            "energy_mj": result.energy,
            "energy_breakdown_mj": result.energy_breakdown,
            "effective_freq_mhz": metrics.effective_freq,
        },
    )


def cmd_spiral(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    phase = _phase(args, calib)
    scenario = spiral_scenario(args.component, phase, pin_freq=args.pin, release_ms=args.release_ms)
    trace = run_scenario(calib, scenario)
    trace.to_csv(run.path("trace.csv"))


def cmd_sweep(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    phase = _phase(args, calib)
    table = calib.table
    grid = SweepGrid(
        tuple(args.cpu or table.cpu),
        tuple(args.gpu or table.gpu),
        (None,) if args.fuse_space else tuple(args.mem or table.mem),
    )
    profiles = sweep(calib, phase, grid, max_workers=args.workers, verbose=args.progress)
    save_profiles(profiles, run.path("profiles.csv"))
    run.write_frame("pareto.csv", pd.DataFrame([_entry_dict(e) for e in pareto(profiles)]))


def _goal(args: argparse.Namespace, calib: Calibration, phase: PhaseSpec) -> SearchGoal:
    if args.goal == "g1" and args.budget_mj is not None:
        return SearchGoal.g1(args.budget_mj)
    if args.goal == "g2" and args.target_ms is not None:
        return SearchGoal.g2(args.target_ms)
    gov = evaluate(calib, FreqConfig(None, None, None), phase)
    logger.info("Goal taken from the default governors: %s", _entry_dict(gov))
    return SearchGoal.g1(gov.energy_per_token) if args.goal == "g1" else SearchGoal.g2(gov.latency)


def cmd_search(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    phase = _phase(args, calib)
    goal = _goal(args, calib, phase)
    evaluator = engine_evaluator(calib, phase)
    cfg, report = run_search(evaluator, calib.table, goal)
    rows = [{"step": 1, **_entry_dict(e)} for e in report.step1] + [{"step": 2, **_entry_dict(e)} for e in report.step2]
    run.write_frame("evaluations.csv", pd.DataFrame(rows))
    summary: Dict[str, Any] = {
        "phase": phase.kind,
        "tokens": phase.tokens,
        "goal": {"kind": goal.kind, "value": goal.value},
        "cfg": {"f_cpu": cfg.f_cpu, "f_gpu": cfg.f_gpu, "f_mem": "default"},
        "candidates": list(report.candidates),
        "inferences_step1": report.inferences_step1,
        "inferences_step2": report.inferences_step2,
        "result": _entry_dict(report.result),
    }
    if args.verify:
        check = oracle_check(evaluator, calib.table, report)
        summary["oracle"] = {
            "optimum": _entry_dict(check.optimum),
            "quasi_convex": check.quasi_convex,
            "matches": check.matches(goal, report.result),  # type: ignore[arg-type]
        }
    run.write_json("search.json", summary)


def cmd_table(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    baseline = gov_baseline(calib)
    goals = gov_goals(calib, args.goal, baseline)
    table, reports = build_config_table(calib, goals, max_workers=args.workers)
    save_table(table, run.path("table.yaml"))
    gains = setting_gains(baseline, {label: report.result for label, report in reports.items()})  # type: ignore[misc]
    gains["inferences_step1"] = [reports[label].inferences_step1 for label in gains["setting"]]
    gains["inferences_step2"] = [reports[label].inferences_step2 for label in gains["setting"]]
    run.write_frame("settings.csv", gains)


def cmd_replay(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    if args.requests:
        requests = load_requests(args.requests)
    else:
        requests = synthesize_requests(args.n, args.seed)
        save_requests(requests, run.path("requests.jsonl"))

    gov = replay(calib, "gov", requests, verbose=args.progress)
    gov.to_csv(run.path("gov.csv"))
    gov.save_summary(run.path("gov-summary.json"))
    if args.policy == "gov":
        return

    if args.table:
        table = load_table(args.table, calib)
    else:
        table, _ = build_config_table(calib, gov_goals(calib, args.goal))
        save_table(table, run.path("table.yaml"))
    fuse = replay(calib, table, requests, verbose=args.progress)
    fuse.to_csv(run.path(f"{fuse.policy}.csv"))
    fuse.save_summary(run.path(f"{fuse.policy}-summary.json"), baseline=gov)


def cmd_isolate(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    phase = _phase(args, calib)
    fixed = FreqConfig(
        args.pin_cpu or calib.table.max("cpu"),
        args.pin_gpu or calib.table.max("gpu"),
        args.pin_mem or calib.table.max("mem"),
    )
    report = isolation_study(calib, phase, args.component, fixed)
    run.write_frame("isolation.csv", report.to_frame())
    run.write_json(
        "isolation.json",
        {
            "component": report.component,
            "effective_freq_mhz": report.effective_freq,
            "governor": _entry_dict(report.governor),
            "faster": _entry_dict(report.faster) if report.faster else None,
            "cheaper": _entry_dict(report.cheaper) if report.cheaper else None,
            "latency_reduction": report.latency_reduction,
            "energy_reduction": report.energy_reduction,
        },
    )


def cmd_report(args: argparse.Namespace, calib: Calibration, run: _Run) -> None:
    if not (args.profiles or args.base):
        msg = "report needs --profiles and/or --base with --other"
        raise ConfigurationError(msg)
    if args.profiles:
        profiles = load_profiles(args.profiles, expected_hash=calib.calib_hash)
        run.write_frame("pareto.csv", pd.DataFrame([_entry_dict(e) for e in pareto(profiles)]))
        frames = []
        for phase in sorted({e.phase for e in profiles}, key=lambda p: p.key):
            frame = gov_vs_pin(calib, phase, profiles).to_frame()
            frame.insert(0, "setting", f"{phase.kind}-{phase.tokens}")
            frames.append(frame)
        run.write_frame("gov_vs_pin.csv", pd.concat(frames, ignore_index=True))
    if args.base:
        if not args.other:
            msg = "--base needs --other"
            raise ConfigurationError(msg)
        base = ReplayReport.from_csv(args.base, policy="base")
        other = ReplayReport.from_csv(args.other, policy="other")
        ratios = compare_reports(base, other)
        run.write_frame("comparison.csv", pd.DataFrame([{"metric": k, "ratio": v} for k, v in ratios.items()]))


COMMANDS: Dict[str, Callable[[argparse.Namespace, Calibration, _Run], None]] = {
    "simulate": cmd_simulate,
    "spiral": cmd_spiral,
    "sweep": cmd_sweep,
    "search": cmd_search,
    "table": cmd_table,
    "replay": cmd_replay,
    "isolate": cmd_isolate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--calib", type=Path, default=None, help="calibration YAML (default: $FUSESIM_CALIB or packaged)")
    common.add_argument("--out", type=Path, default=Path("fusesim-out"), help="output directory")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--target-load", type=float, default=None, help="override the memory governor target load")
    common.add_argument("--quickstep-window", type=int, default=None, help="override the GPU governor window (ms)")
    common.add_argument("--seed", type=int, default=0)

    phase = argparse.ArgumentParser(add_help=False)
    phase.add_argument("--phase", choices=["prefill", "decode"], default="decode")
    phase.add_argument("--np", type=int, default=32, help="prompt tokens of a prefill phase")
    phase.add_argument("--nd", type=int, default=32, help="decode tokens of a decode phase")

    pins = argparse.ArgumentParser(add_help=False)
    pins.add_argument("--pin-cpu", type=_freq, default=None)
    pins.add_argument("--pin-gpu", type=_freq, default=None)
    pins.add_argument("--pin-mem", type=_freq, default=None)

    parser = argparse.ArgumentParser(prog="fusesim", description="Mobile CPU/GPU/memory DVFS simulator for LLM inference")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common, phase, pins], help="run one phase and write its trace")

    spiral = sub.add_parser("spiral", parents=[common, phase], help="pin one processor high, then release it")
    spiral.add_argument("--component", choices=["gpu", "cpu"], default="gpu")
    spiral.add_argument("--pin", type=int, default=None, help="initial pin (default 848 MHz GPU / 2188 MHz CPU)")
    spiral.add_argument("--release-ms", type=int, default=250)

    sweep_parser = sub.add_parser("sweep", parents=[common, phase], help="profile every pinned combination")
    sweep_parser.add_argument("--cpu", type=_freq_list, default=None, help="comma-separated CPU frequencies")
    sweep_parser.add_argument("--gpu", type=_freq_list, default=None, help="comma-separated GPU frequencies")
    sweep_parser.add_argument("--mem", type=_freq_list, default=None, help="comma-separated memory frequencies")
    sweep_parser.add_argument("--fuse-space", action="store_true", help="leave memory to its governor")
    sweep_parser.add_argument("--workers", type=int, default=1)
    sweep_parser.add_argument("--progress", action="store_true", default=None)

    search = sub.add_parser("search", parents=[common, phase], help="two-step frequency search for one setting")
    search.add_argument("--goal", choices=["g1", "g2"], default="g1")
    search.add_argument("--budget-mj", type=float, default=None, help="G1 energy budget per token")
    search.add_argument("--target-ms", type=float, default=None, help="G2 latency target")
    search.add_argument("--verify", action="store_true", help="also evaluate the whole grid and compare")

    table = sub.add_parser("table", parents=[common], help="search all six settings into a lookup table")
    table.add_argument("--goal", choices=["g1", "g2"], default="g1")
    table.add_argument("--workers", type=int, default=1)

    replay_parser = sub.add_parser("replay", parents=[common], help="replay requests under Gov and the lookup table")
    replay_parser.add_argument("--requests", type=Path, default=None, help="JSON-lines request file")
    replay_parser.add_argument("--n", type=int, default=200, help="requests to synthesize without --requests")
    replay_parser.add_argument("--policy", choices=["gov", "both"], default="both")
    replay_parser.add_argument("--table", type=Path, default=None, help="lookup table (default: search one)")
    replay_parser.add_argument("--goal", choices=["g1", "g2"], default="g1")
    replay_parser.add_argument("--progress", action="store_true", default=None)

    isolate = sub.add_parser("isolate", parents=[common, phase, pins], help="one governor against its pinned sweep")
    isolate.add_argument("--component", choices=["cpu", "gpu", "mem"], required=True)

    report = sub.add_parser("report", parents=[common], help="Pareto fronts and normalized comparisons")
    report.add_argument("--profiles", type=Path, default=None, help="profile CSV from sweep")
    report.add_argument("--base", type=Path, default=None, help="baseline replay CSV")
    report.add_argument("--other", type=Path, default=None, help="replay CSV to normalize")

    rerun = sub.add_parser("rerun", help="re-execute a run manifest")
    rerun.add_argument("manifest", type=Path)
    rerun.add_argument("--out", type=Path, default=None, help="write to another directory")
    return parser


def _exit_code(error: FuseSimError) -> int:
    if isinstance(error, (NonTermination, CalibrationInfeasible)):
        return EXIT_SIMULATION
    if isinstance(error, InfeasibleConstraint):
        return EXIT_INFEASIBLE
    if isinstance(error, (ConfigurationError, ValueError)):
        return EXIT_USAGE
    return EXIT_FILE


def _rerun(args: argparse.Namespace) -> int:
    manifest = RunManifest.load(args.manifest)
    argv = list(manifest.argv)
    if args.out is not None:
        argv += ["--out", str(args.out)]
    code = main(argv)
    if code == EXIT_OK:
        out = args.out or Path(manifest.arguments["out"])
        rerun_hash = RunManifest.load(out / MANIFEST).calib_hash
        if rerun_hash != manifest.calib_hash:
            msg = f"Re-run used calibration {rerun_hash}, the manifest recorded {manifest.calib_hash}"
            raise CalibrationMismatch(msg)
    return code


def _absolute_argv(argv: Sequence[str], out: Path) -> List[str]:
    resolved: List[str] = []
    path_next = False
    for token in argv:
        option, sep, value = token.partition("=")
        if path_next:
            token = str(Path(token).resolve())
        elif sep and option in PATH_OPTIONS:
            token = f"{option}={Path(value).resolve()}"
        path_next = token in PATH_OPTIONS
        resolved.append(token)
    if not any(t == "--out" or t.startswith("--out=") for t in argv):
        resolved += ["--out", str(out.resolve())]
    return resolved


def _execute(argv: Sequence[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(args, "log_level", "WARNING"),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "rerun":
        return _rerun(args)

    started = time.perf_counter()
    calib = FuseSim(args.calib).calib
    calib = calib.with_overrides(target_load=args.target_load, quickstep_window=args.quickstep_window)
    out = _Run(args.out)
    COMMANDS[args.command](args, calib, out)

    arguments = {k: (str(v.resolve()) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    RunManifest(
        command=args.command,
        argv=_absolute_argv(argv, args.out),
        arguments=arguments,
        calib_hash=calib.calib_hash,
        seed=args.seed,
        artifacts=out.artifacts,
        wall_clock_s=time.perf_counter() - started,
    ).save(args.out)
    logger.info("%s wrote %s", args.command, ", ".join(out.artifacts))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _execute(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    except FuseSimError as error:
        print(f"fusesim: error: {error}", file=sys.stderr)
        return _exit_code(error)
    except ValueError as error:
        print(f"fusesim: error: {error}", file=sys.stderr)
        return EXIT_USAGE
