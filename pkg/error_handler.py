"""
Error Handler Module
Exception types, structured error logging and the CLI error boundary
"""
import json
import logging
import sys
import traceback
from functools import wraps
from typing import Optional

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    """Base class for every error raised by the pipeline"""

    def __init__(self, message: str, context: Optional[dict] = None):
        super().__init__(message)
        self.context = context or {}


class ShapeError(PipelineError, ValueError):
    """Operand shapes do not conform to an operation or a contract"""


class UnknownOpError(PipelineError, ValueError):
    """Operation kind is not registered"""


class ConfigError(PipelineError, ValueError):
    """Experiment configuration is invalid"""


class LabelRangeError(PipelineError, ValueError):
    """A label lies outside [0, K)"""


class CorruptFileError(PipelineError, ValueError):
    """Checksum, truncation or manifest mismatch in a stored file"""


class GradCheckError(PipelineError, ArithmeticError):
    """Function evaluated to a non-finite value during a finite-difference probe"""


class NonFiniteLossError(PipelineError, ArithmeticError):
    """Training produced a NaN/Inf loss"""


class InvariantBreachError(PipelineError, RuntimeError):
    """A run-level invariant (teacher checksum, loss identity) was violated"""


class GraphError(PipelineError, ValueError):
    """Backward was asked for a loss the graph did not produce"""


class EmptyPredictionError(PipelineError, ValueError):
    """Evaluation had nothing to predict on"""


class ErrorHandler:
    """Centralized structured logging for runs and failures"""

    @staticmethod
    def log_run_event(run: str, action: str, details: Optional[dict] = None):
        """Log a run event with structured logging"""
        log_data = {
            'run': run,
            'action': action,
            'details': details or {}
        }
        logger.info(f"Run event: {log_data}")

    @staticmethod
    def log_error(error_type: str, error_message: str, context: Optional[dict] = None):
        """Log error with structured logging"""
        log_data = {
            'error_type': error_type,
            'error_message': error_message,
            'context': context or {}
        }
        logger.error(f"Error: {log_data}")

    @staticmethod
    def error_record(error: BaseException) -> dict:
        """Machine-readable record printed by the CLI on failure"""
        context = getattr(error, 'context', {}) or {}
        return {
            'error': type(error).__name__,
            'message': str(error),
            'context': _jsonable(context)
        }


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)


def handle_exceptions(func):
    """
    Decorator for CLI commands
    Logs the failure, prints a JSON error record to stderr and returns exit status 1
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception as e:
            logger.error(f"Error in {func.__name__}: {e}")
            logger.debug(''.join(traceback.format_exception(None, e, e.__traceback__)))
            record = ErrorHandler.error_record(e)
            ErrorHandler.log_error(record['error'], record['message'], record['context'])
            print(json.dumps(record, sort_keys=True), file=sys.stderr)
            return 1
    return wrapper


def safe_execute(func):
    """
    Decorator for safe execution without raising exceptions
    Returns None on error
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception as e:
            logger.error(f"Error in {func.__name__}: {e}", exc_info=True)
            return None
    return wrapper
