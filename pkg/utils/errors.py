"""
Module: errors.py

Structured exceptions raised by the panel library and the experiment harness.
The CLI maps ValueError subclasses to exit code 1 and LinAlgError subclasses to exit code 2.
"""

from typing import Iterable, Optional, Sequence

import numpy as np


class PanelValueError(ValueError):
    """Invalid shapes, ids, masks, scenarios or rates."""


class ConfigError(ValueError):
    """Experiment configuration that violates the schema."""

    def __init__(self, message: str, offending_keys: Iterable[str] = ()):
        self.offending_keys = tuple(offending_keys)
        if self.offending_keys:
            message = f"{message}: {', '.join(self.offending_keys)}"
        super().__init__(message)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A covariance-like matrix failed the positive-definiteness floor."""

    def __init__(self, matrix_name: str, min_eigenvalue: Optional[float] = None):
        self.matrix_name = matrix_name
        self.min_eigenvalue = min_eigenvalue
        detail = "" if min_eigenvalue is None else f" (smallest eigenvalue {min_eigenvalue:.3g})"
        super().__init__(f"Matrix '{matrix_name}' is not symmetric positive definite{detail}")


class RankDeficiencyError(np.linalg.LinAlgError):
    """Normal equations are singular; names the columns that are linearly dependent."""

    def __init__(self, dependent_columns: Sequence[str], rank: Optional[int] = None, context: str = ""):
        self.dependent_columns = tuple(dependent_columns)
        self.rank = rank
        where = f" in {context}" if context else ""
        cols = ", ".join(self.dependent_columns) or "unknown"
        super().__init__(f"Rank-deficient design{where}; dependent columns: {cols}")
