from typing import Dict, List, Optional, Union

import click

from app.core.logger import logger

ErrorDetails = Union[str, List[str], Dict[str, List[str]]]


class DiffSegException(Exception):
    """Base exception for pipeline errors"""

    def __init__(
        self,
        message: str = "Operation failed",
        errors: Optional[ErrorDetails] = None,
        exit_code: int = 1
    ):
        self.message = message
        self.errors = errors if errors is not None else []
        self.exit_code = exit_code
        super().__init__(self.message)


class ParameterException(DiffSegException):
    """Exception for invalid arguments and out-of-range parameters"""

    def __init__(self, message: str = "Invalid parameter", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=2)


class ShapeException(DiffSegException):
    """Exception for tensor shape mismatches"""

    def __init__(self, message: str = "Shape mismatch", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=2)


class StateException(DiffSegException):
    """Exception for invalid model or training state"""

    def __init__(self, message: str = "Invalid state", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=3)


class VocabularyException(ParameterException):
    """Exception for category names outside the configured vocabulary"""

    def __init__(self, message: str = "Unknown category", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors)


class DataException(DiffSegException):
    """Exception for malformed annotations or dataset contents"""

    def __init__(self, message: str = "Invalid data", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=4)


class NumericException(DiffSegException):
    """Exception for NaN or infinite values where finite ones are required"""

    def __init__(self, message: str = "Non-finite value", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=5)


class UndefinedMetricException(DiffSegException):
    """Exception for metrics with no defined value"""

    def __init__(self, message: str = "Metric undefined", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=5)


class NotFoundException(DiffSegException):
    """Exception for missing datasets, checkpoints and other files"""

    def __init__(self, message: str = "Resource not found", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=6)


class StorageException(DiffSegException):
    """Exception for unwritable output locations"""

    def __init__(self, message: str = "Storage failure", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=6)


class CheckpointException(DiffSegException):
    """Exception for unreadable or incompatible checkpoints"""

    def __init__(self, message: str = "Incompatible checkpoint", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=7)


class ConfigurationException(DiffSegException):
    """Exception for invalid run configuration"""

    def __init__(self, message: str = "Validation failed", errors: Optional[ErrorDetails] = None):
        super().__init__(message=message, errors=errors, exit_code=2)


# Command-line exception handlers

def diffseg_exception_handler(exc: DiffSegException) -> int:
    """Log a pipeline exception, echo it to stderr and return the exit code"""
    logger.warning(f"{type(exc).__name__}: {exc.message} - {exc.errors}")

    click.secho(f"Error: {exc.message}", fg="red", err=True)
    if isinstance(exc.errors, dict):
        for field, messages in exc.errors.items():
            for message in messages:
                click.echo(f"  {field}: {message}", err=True)
    elif isinstance(exc.errors, list):
        for message in exc.errors:
            click.echo(f"  {message}", err=True)
    elif exc.errors:
        click.echo(f"  {exc.errors}", err=True)

    return exc.exit_code


def general_exception_handler(exc: Exception) -> int:
    """Handle unexpected exceptions"""
    logger.error(f"Unexpected error: {str(exc)}", exc_info=True)
    click.secho("Error: An unexpected error occurred", fg="red", err=True)
    return 1
