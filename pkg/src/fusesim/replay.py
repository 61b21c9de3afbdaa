import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import optimize, stats
from tqdm import tqdm
from typing_extensions import Literal

from fusesim.calibration import Calibration
from fusesim.engine import SimTrace, run_phase
from fusesim.exceptions import FuseSimError, RequestFileError, RequestSetMismatch
from fusesim.governors import GovernorSet
from fusesim.metrics import e2e_latency
from fusesim.models import MAX_DECODE_TOKENS, MAX_PREFILL_TOKENS, PhaseSpec, Request
from fusesim.search import FuseTable, lookup_config

logger = logging.getLogger(__name__)

NOMINAL_VOLTAGE = 3.85
PREFILL_MEAN = 232.4
DECODE_MEAN = 70.0
PREFILL_SIGMA = 0.6
DECODE_SIGMA = 0.7

Policy = Union[Literal["gov"], FuseTable]

REPORT_COLUMNS = [
    "id",
    "prefill_tokens",
    "decode_tokens",
    "ttft_ms",
    "tpot_ms",
    "e2e_ms",
    "prefill_energy_mj",
    "decode_energy_mj",
    "energy_mj",
]


def load_requests(path: Union[str, Path]) -> List[Request]:
    """
    Read a JSON-lines request file.

    Each non-blank line holds ``{"id": ..., "prefill_tokens": ..., "decode_tokens": ...}``.

    Raises
    ------
    RequestFileError
        On malformed lines, missing fields, out-of-bound lengths or duplicate ids, naming the line.
    """
    path = Path(path)
    if not path.is_file():
        msg = f"Request file {path} does not exist."
        raise RequestFileError(msg)
    requests: List[Request] = []
    seen = set()
    with path.open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                request = Request(
                    id=str(record["id"]),
                    prefill_tokens=int(record["prefill_tokens"]),
                    decode_tokens=int(record["decode_tokens"]),
                )
            except json.JSONDecodeError as error:
                msg = f"not valid JSON: {error.msg}"
                raise RequestFileError(msg, line=number) from error
            except (KeyError, TypeError) as error:
                msg = f"expected id, prefill_tokens and decode_tokens: {error}"
                raise RequestFileError(msg, line=number) from error
            except ValueError as error:
                raise RequestFileError(str(error), line=number) from error
            if request.id in seen:
                msg = f"duplicate request id {request.id!r}"
                raise RequestFileError(msg, line=number)
            seen.add(request.id)
            requests.append(request)
    return requests


def save_requests(requests: Iterable[Request], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for request in requests:
            handle.write(json.dumps(asdict(request)) + "\n")
    return path


def _stratified_lengths(
    rng: np.random.Generator, n: int, sigma: float, target_mean: float, upper: int
) -> np.ndarray:
    # one normal quantile per equal-probability stratum, jittered within it
    quantiles = np.clip((np.arange(n) + rng.random(n)) / n, 1e-12, 1.0 - 1e-12)
    z = stats.norm.ppf(quantiles)

    def _lengths(mu: float) -> np.ndarray:
        return np.clip(np.ceil(np.exp(mu + sigma * z)), 1, upper)

    # the clipped mean is a non-decreasing step function of mu
    mu = optimize.brentq(lambda m: _lengths(m).mean() - target_mean, 0.0, math.log(upper) + 4 * sigma, xtol=1e-9)
    return rng.permutation(_lengths(mu).astype(int))


def synthesize_requests(n: int, seed: int = 0) -> List[Request]:
    """
    Deterministic request set with log-normal prompt and decode lengths.

    The log-means are fitted so the clipped sample means land on 232.4 prompt and 70.0 decode
    tokens; lengths stay within (0, 512] and (0, 256].
    """
    if n < 1:
        msg = f"Synthesize at least one request, got n={n}."
        raise ValueError(msg)
    rng = np.random.default_rng(seed)
    prefill = _stratified_lengths(rng, n, PREFILL_SIGMA, PREFILL_MEAN, MAX_PREFILL_TOKENS)
    decode = _stratified_lengths(rng, n, DECODE_SIGMA, DECODE_MEAN, MAX_DECODE_TOKENS)
    return [Request(f"req-{i:04d}", int(p), int(d)) for i, (p, d) in enumerate(zip(prefill, decode))]


@dataclass(frozen=True)
class RequestResult:
    id: str
    prefill_tokens: int
    decode_tokens: int
    ttft: float
    tpot: float
    e2e: float
    prefill_energy: float
    decode_energy: float

    @property
    def energy(self) -> float:
        return self.prefill_energy + self.decode_energy


@dataclass
class ReplayReport:
    """
    Per-request results of one policy over a request list.

    Attributes
    ----------
    policy : str
        ``"gov"`` or ``"fuse-g1"`` / ``"fuse-g2"``.
    calib_hash : str
    results : List[RequestResult]
    traces : List[SimTrace]
        Prefill and decode traces per request, only kept when requested.
    """

    policy: str
    calib_hash: str
    results: List[RequestResult] = field(default_factory=list)
    traces: List[SimTrace] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.results)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.results]

    def _mean(self, name: str) -> float:
        if not self.results:
            return 0.0
        return math.fsum(getattr(r, name) for r in self.results) / len(self.results)

    @property
    def mean_ttft(self) -> float:
        return self._mean("ttft")

    @property
    def mean_tpot(self) -> float:
        return self._mean("tpot")

    @property
    def mean_e2e(self) -> float:
        return self._mean("e2e")

    @property
    def total_energy(self) -> float:
        """mJ."""
        return math.fsum(term for r in self.results for term in (r.prefill_energy, r.decode_energy))

    @property
    def total_mah(self) -> float:
        # mJ / V = mC, 3600 mC per mAh
        return self.total_energy / NOMINAL_VOLTAGE / 3600.0

    def summary(self) -> Dict[str, object]:
        return {
            "policy": self.policy,
            "calib_hash": self.calib_hash,
            "requests": len(self.results),
            "mean_ttft_ms": self.mean_ttft,
            "mean_tpot_ms": self.mean_tpot,
            "mean_e2e_ms": self.mean_e2e,
            "total_energy_mj": self.total_energy,
            "total_mah": self.total_mah,
            "nominal_voltage_v": NOMINAL_VOLTAGE,
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (r.id, r.prefill_tokens, r.decode_tokens, r.ttft, r.tpot, r.e2e, r.prefill_energy, r.decode_energy, r.energy)
            for r in self.results
        ]
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    def save_summary(self, path: Union[str, Path], baseline: Optional["ReplayReport"] = None) -> Path:
        summary = self.summary()
        if baseline is not None:
            summary["normalized_to"] = baseline.policy
            summary["ratios"] = compare_reports(baseline, self)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], policy: str, calib_hash: str = "") -> "ReplayReport":
        frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
        if list(frame.columns) != REPORT_COLUMNS:
            msg = f"Replay report {path} has columns {list(frame.columns)}, expected {REPORT_COLUMNS}."
            raise RequestFileError(msg)
        results = [
            RequestResult(
                id=row.id,
                prefill_tokens=int(row.prefill_tokens),
                decode_tokens=int(row.decode_tokens),
                ttft=float(row.ttft_ms),
                tpot=float(row.tpot_ms),
                e2e=float(row.e2e_ms),
                prefill_energy=float(row.prefill_energy_mj),
                decode_energy=float(row.decode_energy_mj),
            )
            for row in frame.itertuples(index=False)
        ]
        return cls(policy, calib_hash, results)


def policy_label(policy: Policy) -> str:
    if isinstance(policy, FuseTable):
        kinds = {entry.goal.kind for entry in policy.entries.values()}
        return "fuse-" + "+".join(sorted(kinds))
    if policy != "gov":
        msg = f"Unknown policy {policy!r}, expected 'gov' or a lookup table."
        raise ValueError(msg)
    return "gov"


def replay(
    calib: Calibration,
    policy: Policy,
    requests: Sequence[Request],
    keep_traces: bool = False,
    verbose: Optional[bool] = None,
) -> ReplayReport:
    """
    Run each request's prefill then decode, one request after another.

    Parameters
    ----------
    calib : Calibration
    policy : Policy
        ``"gov"`` keeps every component under its default governor. A ``FuseTable`` pins
        CPU and GPU from the table at each phase start and hands them back to their governors
        at phase end; memory stays under its governor.
    requests : Sequence[Request]
    keep_traces : bool
        Record per-tick traces of every phase in the report.
    verbose : Optional[bool]
        Display tqdm progress bar.

    Returns
    -------
    ReplayReport
    """
    label = policy_label(policy)
    table = policy if isinstance(policy, FuseTable) else None
    if table is not None:
        table.validate(calib.table)
    report = ReplayReport(label, calib.calib_hash)
    # one device: governor state carries from phase to phase and request to request
    govs = GovernorSet.default(calib.table, calib.governors)
    disable = not verbose if verbose is not None else None
    logger.info("Replaying %d requests under %s", len(requests), label)

    for request in tqdm(requests, disable=disable, desc=f"Replaying {label}"):
        phases = (
            PhaseSpec.prefill(request.prefill_tokens, calib.perf.prefill.kernels_per_token),
            PhaseSpec.decode(request.decode_tokens, calib.perf.decode.kernels_per_token),
        )
        results = []
        for phase in phases:
            if table is not None:
                cfg = lookup_config(table, phase.kind, request.prefill_tokens)
                govs.apply("cpu", cfg.f_cpu)  # type: ignore[arg-type]
                govs.apply("gpu", cfg.f_gpu)  # type: ignore[arg-type]
            try:
                trace, result = run_phase(calib, govs, phase, record=keep_traces)
            except FuseSimError as error:
                msg = f"request {request.id} ({phase.kind}): {error}"
                raise type(error)(msg) from error
            if table is not None:
                govs.apply("cpu", "default")
                govs.apply("gpu", "default")
            if keep_traces:
                report.traces.append(trace)
            results.append(result)

        prefill, decode = results
        report.results.append(
            RequestResult(
                id=request.id,
                prefill_tokens=request.prefill_tokens,
                decode_tokens=request.decode_tokens,
                ttft=prefill.latency,
                tpot=decode.latency,
                e2e=e2e_latency(prefill.latency, decode.latency, request.decode_tokens),
                prefill_energy=prefill.energy,
                decode_energy=decode.energy,
            )
        )
    logger.info(
        "%s: mean TTFT %.1f ms, mean TPOT %.2f ms, total %.1f mJ",
        label,
        report.mean_ttft,
        report.mean_tpot,
        report.total_energy,
    )
    return report


def compare_reports(base: ReplayReport, other: ReplayReport) -> Dict[str, float]:
    """Ratios ``other / base`` of mean TTFT, TPOT, E2E and of total energy."""
    if base.ids != other.ids:
        msg = f"Cannot compare {base.policy} and {other.policy}: they replayed different requests."
        raise RequestSetMismatch(msg)
    if not base.results:
        msg = "Cannot normalize against an empty report."
        raise ValueError(msg)
    return {
        "ttft": other.mean_ttft / base.mean_ttft,
        "tpot": other.mean_tpot / base.mean_tpot,
        "e2e": other.mean_e2e / base.mean_e2e,
        "energy": other.total_energy / base.total_energy,
    }
