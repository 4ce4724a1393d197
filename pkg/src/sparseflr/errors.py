"""Exception types shared across the package.

Two families matter to callers: data problems (bad input files, schema
mismatches, out-of-domain rows) and numerical failures inside a fitting
stage. The CLI maps them to distinct exit codes.
"""

from __future__ import annotations


class DataError(ValueError):
    """Input data is unusable: schema, parsing, or domain problems."""


class SchemaError(DataError):
    """A required column is missing or the file layout is wrong."""


class ParseError(DataError):
    """A cell failed numeric parsing; the message carries the row number."""


class FitError(RuntimeError):
    """A fitting stage failed numerically.

    Parameters
    ----------
    stage : str
        Name of the pipeline stage that failed (e.g. ``"covariance_x"``).
    message : str
        Human-readable description.
    """

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
