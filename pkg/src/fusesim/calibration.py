import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing_extensions import Literal

from fusesim.exceptions import ConfigurationError, InvalidFrequency
from fusesim.models import (
    PIXEL7_CPU,
    PIXEL7_GPU,
    PIXEL7_MEM,
    Anchor,
    ComponentPower,
    EasParams,
    EngineParams,
    FreqConfig,
    FrequencyTable,
    GovernorParams,
    InteractiveParams,
    PerfModelParams,
    PhaseParams,
    PowerModelParams,
    QuickstepParams,
    QuickstepRow,
)
from fusesim.perf import calibrate_from_targets

logger = logging.getLogger(__name__)

DEFAULT_CALIBRATION = Path(__file__).parent / "data" / "pixel7_tinyllama.yaml"
STOCK_GOVERNORS_CALIBRATION = Path(__file__).parent / "data" / "pixel7_tinyllama_uniform.yaml"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TableDoc(_Strict):
    cpu: List[int] = Field(default_factory=lambda: list(PIXEL7_CPU))
    gpu: List[int] = Field(default_factory=lambda: list(PIXEL7_GPU))
    mem: List[int] = Field(default_factory=lambda: list(PIXEL7_MEM))

    @field_validator("cpu", "gpu", "mem")
    @classmethod
    def _increasing(cls, freqs: List[int]) -> List[int]:
        if not freqs or any(lo >= hi for lo, hi in zip(freqs, freqs[1:])):
            msg = "frequency lists must be non-empty and strictly increasing"
            raise ValueError(msg)
        return freqs


class PhaseDoc(_Strict):
    w_c: float = Field(ge=0)
    w_g: float = Field(gt=0)
    b_m: float = Field(ge=0)
    g_c: float = Field(0.0, ge=0)
    g0: float = Field(0.0, ge=0)
    issue_overlap: float = Field(0.0, ge=0, lt=1)
    kernels_per_token: int = Field(100, ge=1)
    n_ref: int = Field(32, ge=1)
    cpu_work_exponent: float = Field(0.5, ge=0)


class PerfDoc(_Strict):
    decode: PhaseDoc
    prefill: PhaseDoc


class ComponentPowerDoc(_Strict):
    a: float = Field(ge=0)
    b: float = Field(ge=0)
    exponent: float = Field(3.0, gt=0)


class PowerDoc(_Strict):
    p_idle: float = Field(600.0, gt=0)
    cpu: ComponentPowerDoc = ComponentPowerDoc(a=2600.0, b=400.0, exponent=3.0)
    gpu: ComponentPowerDoc = ComponentPowerDoc(a=2000.0, b=400.0, exponent=3.0)
    mem: ComponentPowerDoc = ComponentPowerDoc(a=1200.0, b=300.0, exponent=2.0)


class QuickstepDoc(_Strict):
    window_ms: int = Field(20, ge=1)
    # rows of [freq, min_util, max_util]; omitted means 0.60/0.90 on every row
    bands: Optional[List[Tuple[int, float, float]]] = None


class EasDoc(_Strict):
    decay: float = Field(0.5 ** (1 / 32), gt=0, lt=1)
    headroom: float = Field(1.25, ge=1)
    capacity: float = Field(1024.0, gt=0)


class InteractiveDoc(_Strict):
    target_load: float = Field(0.7, gt=0, le=1)
    period_ms: int = Field(20, ge=1)


class GovernorsDoc(_Strict):
    quickstep: QuickstepDoc = QuickstepDoc()
    eas: EasDoc = EasDoc()
    interactive: InteractiveDoc = InteractiveDoc()


class EngineDoc(_Strict):
    warmup_ms: float = Field(50.0, ge=0)
    stall_limit_ms: float = Field(60_000.0, gt=0)


class AnchorDoc(_Strict):
    phase: Literal["prefill", "decode"]
    f_cpu: int
    f_gpu: int
    f_mem: int
    metric: Literal["u_cpu", "u_gpu"]
    value: float = Field(ge=0, le=1)


class CalibrationDoc(_Strict):
    model: str = "unnamed"
    table: TableDoc = TableDoc()
    perf: PerfDoc
    power: PowerDoc = PowerDoc()
    governors: GovernorsDoc = GovernorsDoc()
    engine: EngineDoc = EngineDoc()
    anchors: List[AnchorDoc] = Field(default_factory=list)

    @model_validator(mode="after")
    def _bands_cover_gpu(self) -> "CalibrationDoc":
        bands = self.governors.quickstep.bands
        if bands is None:
            return self
        if [row[0] for row in bands] != list(self.table.gpu):
            msg = "quickstep bands must list exactly the GPU frequencies, in order"
            raise ValueError(msg)
        for freq, lo, hi in bands:
            if not 0.0 <= lo < hi <= 1.0:
                msg = f"quickstep band for {freq} MHz must satisfy 0 <= min < max <= 1"
                raise ValueError(msg)
        for (freq, _, hi), (_, next_lo, _) in zip(bands, bands[1:]):
            if next_lo > hi:
                msg = f"dead band above {freq} MHz: next row's min exceeds this row's max"
                raise ValueError(msg)
        return self


@dataclass(frozen=True)
class Calibration:
    """
    Everything a simulation needs: frequencies, workload, power and governor parameters.

    Attributes
    ----------
    model : str
        Name of the calibrated model/device pair.
    table : FrequencyTable
    perf : PerfModelParams
    power : PowerModelParams
    governors : GovernorParams
    engine : EngineParams
    anchors : Tuple[Anchor, ...]
        Observed utilizations the workload terms were fitted to.
    """

    model: str
    table: FrequencyTable
    perf: PerfModelParams
    power: PowerModelParams
    governors: GovernorParams
    engine: EngineParams = EngineParams()
    anchors: Tuple[Anchor, ...] = ()
    calib_hash: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.calib_hash:
            object.__setattr__(self, "calib_hash", calibration_hash(self.to_document()))

    def to_document(self) -> CalibrationDoc:
        def _phase(params: PhaseParams) -> PhaseDoc:
            return PhaseDoc(
                w_c=params.w_c,
                w_g=params.w_g,
                b_m=params.b_m,
                g_c=params.g_c,
                g0=params.g0,
                issue_overlap=params.issue_overlap,
                kernels_per_token=params.kernels_per_token,
                n_ref=params.n_ref,
                cpu_work_exponent=params.cpu_work_exponent,
            )

        def _power(part: ComponentPower) -> ComponentPowerDoc:
            return ComponentPowerDoc(a=part.a, b=part.b, exponent=part.exponent)

        quickstep = self.governors.quickstep
        return CalibrationDoc(
            model=self.model,
            table=TableDoc(cpu=list(self.table.cpu), gpu=list(self.table.gpu), mem=list(self.table.mem)),
            perf=PerfDoc(decode=_phase(self.perf.decode), prefill=_phase(self.perf.prefill)),
            power=PowerDoc(
                p_idle=self.power.p_idle,
                cpu=_power(self.power.cpu),
                gpu=_power(self.power.gpu),
                mem=_power(self.power.mem),
            ),
            governors=GovernorsDoc(
                quickstep=QuickstepDoc(
                    window_ms=quickstep.window_ms,
                    bands=[(row.freq, row.min_util, row.max_util) for row in quickstep.rows],
                ),
                eas=EasDoc(
                    decay=self.governors.eas.decay,
                    headroom=self.governors.eas.headroom,
                    capacity=self.governors.eas.capacity,
                ),
                interactive=InteractiveDoc(
                    target_load=self.governors.interactive.target_load,
                    period_ms=self.governors.interactive.period_ms,
                ),
            ),
            engine=EngineDoc(warmup_ms=self.engine.warmup_ms, stall_limit_ms=self.engine.stall_limit_ms),
            anchors=[
                AnchorDoc(
                    phase=a.phase,
                    f_cpu=a.cfg.f_cpu,
                    f_gpu=a.cfg.f_gpu,
                    f_mem=a.cfg.f_mem,
                    metric=a.metric,
                    value=a.value,
                )
                for a in self.anchors
            ],
        )

    def with_overrides(
        self,
        target_load: Optional[float] = None,
        quickstep_window: Optional[int] = None,
        eas_headroom: Optional[float] = None,
    ) -> "Calibration":
        """Copy with governor parameters replaced; the hash is recomputed."""
        data = self.to_document().model_dump()
        governors = data["governors"]
        if target_load is not None:
            governors["interactive"]["target_load"] = target_load
        if quickstep_window is not None:
            governors["quickstep"]["window_ms"] = quickstep_window
        if eas_headroom is not None:
            governors["eas"]["headroom"] = eas_headroom
        return calibration_from_document(data)

    def recalibrated(self) -> "Calibration":
        """Refit the workload terms to this calibration's anchors."""
        perf = calibrate_from_targets(self.anchors, self.perf)
        return replace(self, perf=perf, calib_hash="")


def calibration_hash(doc: CalibrationDoc) -> str:
    canonical = json.dumps(doc.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def calibration_from_document(data: Dict[str, Any]) -> Calibration:
    try:
        doc = CalibrationDoc.model_validate(data)
    except ValidationError as error:
        msg = f"Invalid calibration document: {error}"
        raise ConfigurationError(msg) from error

    table = FrequencyTable(tuple(doc.table.cpu), tuple(doc.table.gpu), tuple(doc.table.mem))
    quickstep_doc = doc.governors.quickstep
    if quickstep_doc.bands is None:
        quickstep = QuickstepParams.uniform(table.gpu, window_ms=quickstep_doc.window_ms)
    else:
        quickstep = QuickstepParams(
            rows=tuple(QuickstepRow(freq, lo, hi) for freq, lo, hi in quickstep_doc.bands),
            window_ms=quickstep_doc.window_ms,
        )

    def _power(part: ComponentPowerDoc) -> ComponentPower:
        return ComponentPower(part.a, part.b, part.exponent)

    try:
        anchors = tuple(
            Anchor(a.phase, table.validate(FreqConfig(a.f_cpu, a.f_gpu, a.f_mem)), a.metric, a.value)
            for a in doc.anchors
        )
    except InvalidFrequency as error:
        msg = f"Invalid calibration anchor: {error}"
        raise ConfigurationError(msg) from error
    return Calibration(
        model=doc.model,
        table=table,
        perf=PerfModelParams(
            decode=PhaseParams(**doc.perf.decode.model_dump()),
            prefill=PhaseParams(**doc.perf.prefill.model_dump()),
        ),
        power=PowerModelParams(
            p_idle=doc.power.p_idle,
            cpu=_power(doc.power.cpu),
            gpu=_power(doc.power.gpu),
            mem=_power(doc.power.mem),
        ),
        governors=GovernorParams(
            quickstep=quickstep,
            eas=EasParams(**doc.governors.eas.model_dump()),
            interactive=InteractiveParams(**doc.governors.interactive.model_dump()),
        ),
        engine=EngineParams(warmup_ms=doc.engine.warmup_ms, stall_limit_ms=doc.engine.stall_limit_ms),
        anchors=anchors,
    )


def load_calibration(path: Optional[Union[str, Path]] = None) -> Calibration:
    path = Path(path) if path is not None else DEFAULT_CALIBRATION
    if not path.is_file():
        msg = f"Calibration file {path} does not exist."
        raise ConfigurationError(msg)
    with path.open("r", encoding="utf-8") as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as error:
            msg = f"Calibration file {path} is not valid YAML: {error}"
            raise ConfigurationError(msg) from error
    if not isinstance(data, dict):
        msg = f"Calibration file {path} must hold a single mapping."
        raise ConfigurationError(msg)
    calib = calibration_from_document(data)
    logger.info("Loaded calibration %s (%s) from %s", calib.model, calib.calib_hash, path)
    return calib


def save_calibration(calib: Calibration, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(calib.to_document().model_dump(mode="json"), handle, sort_keys=False)
    return path
