"""Normalizing-flow priors learned from noisy, incomplete measurements."""
import os as _os

if "AMBIENTFLOW_THREADS" in _os.environ:
    # only effective when numpy has not been imported yet
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["AMBIENTFLOW_THREADS"])

from .errors import (AmbientFlowError, BudgetError, ConfigError, DivergenceError, DomainError,
                     IngestError, NumericError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "AmbientFlowError",
    "BudgetError",
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "IngestError",
    "NumericError",
    "UsageError",
    "__version__",
]
