"""
Exception hierarchy for the homogenization lab and a central ErrorHandler that
logs failures and turns them into stable CLI exit codes and report dicts.
"""
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_AXIOM = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_PROPERTY = 4
EXIT_USAGE = 64


class LabError(Exception):
    """Base class for every error raised by the lab."""
    exit_code = EXIT_FAILURE


class DomainError(LabError):
    """A site, window or state lies outside the simulation box."""


class ConfigurationError(LabError):
    """Malformed potential, geometry or run configuration."""
    exit_code = EXIT_USAGE


class NumericError(LabError):
    """Non-finite values or a quadrature that did not converge."""


class SamplerStallError(LabError):
    """No proposal was accepted during a full sampler window."""


class AmbiguousWindingError(LabError):
    """An angle increment too large to unwind unambiguously."""


class ResolutionError(LabError):
    """Time step too coarse to resolve the fast scale."""


class MatrixNotPSDError(LabError):
    """A block that should be positive semidefinite is indefinite."""


class SmoothingBudgetError(LabError):
    """Frequency cutoff exhausted before the smoothing target was met."""


class TruncationInfeasibleError(LabError):
    """No truncation level satisfies the defining inequality."""

    def __init__(self, message: str, violating_constant: float):
        super().__init__(message)
        self.violating_constant = violating_constant


class ConditionNumberError(LabError):
    """Factor block too ill-conditioned to recover driver increments."""


class AxiomFailure(LabError):
    """The interaction family violates periodicity, shift invariance or range."""
    exit_code = EXIT_AXIOM


class MissingArtifactError(LabError):
    """A stage needs an upstream output that has not been produced."""
    exit_code = EXIT_MISSING_ARTIFACT


class PropertyFailure(LabError):
    """A checked invariant failed beyond its error bars."""
    exit_code = EXIT_PROPERTY

    def __init__(self, invariant: str, detail: str = "", result: Optional[Dict[str, Any]] = None):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant
        self.result = result


class ErrorHandler:
    """Logs lab errors and produces standardized error records."""

    @staticmethod
    def exit_code(error: BaseException) -> int:
        if isinstance(error, LabError):
            return error.exit_code
        return EXIT_FAILURE

    @staticmethod
    def handle(error: BaseException, stage: Optional[str] = None) -> Dict[str, Any]:
        """
        Log an error and build the record written to the run manifest.

        Args:
            error (BaseException): The error raised while running a stage
            stage (Optional[str]): Name of the stage that failed

        Returns:
            Dict[str, Any]: Error record with exit code and timestamp
        """
        code = ErrorHandler.exit_code(error)
        if isinstance(error, LabError):
            logger.error(f"{type(error).__name__} in stage {stage}: {error}")
        else:
            logger.exception(f"Unexpected error in stage {stage}")
        record = {
            "event": "stage_error",
            "stage": stage,
            "error": type(error).__name__,
            "message": str(error),
            "exit_code": code,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        if isinstance(error, PropertyFailure):
            record["invariant"] = error.invariant
        return record
