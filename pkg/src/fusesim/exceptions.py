from typing import Optional


class FuseSimError(Exception): ...


class ConfigurationError(FuseSimError): ...


class CalibrationInfeasible(FuseSimError): ...


class InvalidFrequency(FuseSimError, ValueError): ...


class NonTermination(FuseSimError): ...


class InfeasibleConstraint(FuseSimError): ...


class BudgetInfeasible(InfeasibleConstraint): ...


class TargetInfeasible(InfeasibleConstraint): ...


class ProfileSchemaError(FuseSimError): ...


class CalibrationMismatch(FuseSimError): ...


class TableFileError(FuseSimError): ...


class RequestSetMismatch(FuseSimError): ...


class RequestFileError(FuseSimError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
