"""
Common error handling utilities for the application
"""
from typing import Any, Dict, List, Optional
import logging

from pydantic import ValidationError

logger = logging.getLogger(__name__)

# Process exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_FAILURE = 2


class ErrorMessages:
    """Standard error messages for consistent reporting"""

    # Geometry errors
    INDEX_OUT_OF_RANGE = "Voxel index {index} is outside grid {shape}"
    POSITION_OUT_OF_RANGE = "Position {position} mm lies outside the grid extent"
    GRID_MISMATCH = "Grid mismatch: {left} vs {right}"
    PHANTOM_EXCEEDS_GRID = "Phantom exceeds grid extent: {violations}"
    DETECTOR_MISMATCH = "Detector raster {detector} does not match grid {grid}"
    ORBIT_INSIDE_OBJECT = "Rotation radius {radius} mm does not clear the object radius {extent} mm"

    # Parameter validation errors
    INVALID_PARAMETER_VALUE = "Invalid value for '{param}': {reason}"
    PARAMETER_OUT_OF_RANGE = "Parameter '{param}' must be between {min_val} and {max_val}"
    NON_POSITIVE = "Parameter '{param}' must be strictly positive"

    # Numerical errors
    ZERO_SENSITIVITY = "{count} voxels have zero sensitivity but a positive estimate"
    EMPTY_REGION = "Region '{region}' contains no voxels"
    ZERO_PROJECTIONS = "Projection data sum to zero; cannot scale to {target} counts"

    # File errors
    MISSING_INPUT = "Required input '{path}' does not exist"
    CHECKSUM_MISMATCH = "Checksum mismatch for '{path}'"

    # Pipeline errors
    UNKNOWN_VARIANT = "Unknown variant '{name}'; the study defines {known}"
    INVALID_CONFIG = "The study configuration is invalid. Please check the following fields:"
    STAGE_FAILED = "Stage '{stage}' failed during {operation}"


class SimulationError(Exception):
    """Base error carrying a structured detail payload"""

    exit_code = EXIT_RUNTIME_FAILURE
    error_type = "Simulation Error"

    def __init__(
        self,
        message: str,
        details: Optional[Any] = None,
        field: Optional[str] = None,
        error_type: Optional[str] = None,
    ):
        super().__init__(message)
        self.message = message
        self.details = details
        self.field = field
        if error_type is not None:
            self.error_type = error_type

    def to_dict(self) -> Dict[str, Any]:
        detail = {
            "error": self.error_type,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        if self.details is not None:
            detail["details"] = self.details
        if self.field is not None:
            detail["field"] = self.field
        return detail


class InvalidParameterError(SimulationError, ValueError):
    error_type = "Invalid Parameter"


class GridMismatchError(SimulationError, ValueError):
    error_type = "Grid Mismatch"


class PhantomExtentError(SimulationError, ValueError):
    error_type = "Phantom Extent Error"


class ZeroSensitivityError(SimulationError, ArithmeticError):
    error_type = "Zero Sensitivity"


class EmptyRegionError(SimulationError, ValueError):
    error_type = "Empty Region"


class ChecksumError(SimulationError, IOError):
    error_type = "Checksum Error"


class ConfigError(SimulationError):
    exit_code = EXIT_CONFIG_ERROR
    error_type = "Configuration Error"


class StageFailure(SimulationError):
    error_type = "Stage Failure"


def create_error(
    error_cls: type,
    message: str,
    details: Optional[Any] = None,
    field: Optional[str] = None,
) -> SimulationError:
    """
    Create a standardized error

    Args:
        error_cls: SimulationError subclass to instantiate
        message: Human-readable error message
        details: Additional error details
        field: Parameter name if error is field-specific

    Returns:
        SimulationError with standardized payload
    """
    return error_cls(message, details=details, field=field)


def require_positive(value: float, param: str) -> None:
    """Raise InvalidParameterError unless value > 0"""
    if not value > 0:
        raise create_error(
            InvalidParameterError,
            ErrorMessages.NON_POSITIVE.format(param=param),
            details={"provided_value": value},
            field=param,
        )


def require_in_range(value: float, param: str, min_val: float, max_val: float) -> None:
    """Raise InvalidParameterError unless min_val <= value <= max_val"""
    if not (min_val <= value <= max_val):
        raise create_error(
            InvalidParameterError,
            ErrorMessages.PARAMETER_OUT_OF_RANGE.format(param=param, min_val=min_val, max_val=max_val),
            details={"provided_value": value},
            field=param,
        )


def format_validation_error(exc: ValidationError, source: str = "config") -> List[Dict[str, Any]]:
    """
    Turn a pydantic ValidationError into field-located diagnostics

    Args:
        exc: The validation error
        source: Name of the file or object that was validated

    Returns:
        List of {field, message, error_type} dicts
    """
    errors = []
    for error in exc.errors():
        field_name = " -> ".join(str(loc) for loc in error["loc"]) or "<root>"
        error_msg = error["msg"]
        error_type = error["type"]

        if error_type == "missing":
            user_friendly_msg = f"Required field '{field_name}' is missing."
        elif error_type.endswith("_type") or error_type.endswith("_parsing"):
            user_friendly_msg = f"Invalid data type for field '{field_name}'. {error_msg}"
        else:
            user_friendly_msg = f"Invalid value for field '{field_name}': {error_msg}"

        errors.append({
            "source": source,
            "field": field_name,
            "message": user_friendly_msg,
            "error_type": error_type,
        })
    return errors


def config_error_from_validation(exc: ValidationError, source: str) -> ConfigError:
    """Wrap a pydantic ValidationError as a ConfigError with diagnostics"""
    details = format_validation_error(exc, source)
    logger.error(f"Validation error in {source}: {len(details)} problem(s)")
    return ConfigError(ErrorMessages.INVALID_CONFIG, details=details)


def handle_service_error(e: Exception, service_name: str, operation: str) -> SimulationError:
    """
    Handle service-level errors with consistent logging and payload format

    Args:
        e: The exception that occurred
        service_name: Name of the stage where error occurred
        operation: The operation being performed

    Returns:
        SimulationError to be raised by the caller
    """
    logger.error(f"Error during {operation} with {service_name}: {e}")

    if isinstance(e, SimulationError):
        return e

    if isinstance(e, ValidationError):
        return config_error_from_validation(e, service_name)

    if isinstance(e, FileNotFoundError):
        return create_error(
            StageFailure,
            ErrorMessages.MISSING_INPUT.format(path=getattr(e, "filename", str(e))),
            details={"service": service_name, "operation": operation, "error_type": "missing_input"},
        )

    if isinstance(e, MemoryError):
        return create_error(
            StageFailure,
            f"Out of memory during {operation}. Use a smaller grid or the --fast mode.",
            details={"service": service_name, "operation": operation, "error_type": "memory"},
        )

    # Generic stage failure
    return create_error(
        StageFailure,
        ErrorMessages.STAGE_FAILED.format(stage=service_name, operation=operation),
        details={"service": service_name, "operation": operation, "cause": f"{type(e).__name__}: {e}"},
    )
