"""
errors.py — Exception hierarchy shared by every cnmgp module
=============================================================
The CLI maps the three families below onto exit codes:
    config errors    -> 1
    data errors      -> 2
    numerical errors -> 3
"""


class CnmgpError(Exception):
    """Base class; anything not in the config/data families is numerical."""


# ─────────────────────────────────────────────────────────────
# CONFIG
# ─────────────────────────────────────────────────────────────
class ConfigError(CnmgpError):
    pass


# ─────────────────────────────────────────────────────────────
# DATA
# ─────────────────────────────────────────────────────────────
class DataError(CnmgpError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(f"{message} (row {row}, column {column!r})")
        self.row = row
        self.column = column


class NoObservedEntries(DataError):
    pass


class DegenerateOutput(DataError):
    pass


class EmptyTestSet(DataError):
    pass


# ─────────────────────────────────────────────────────────────
# NUMERICAL
# ─────────────────────────────────────────────────────────────
class NotPositiveDefinite(CnmgpError):
    pass


class DimensionMismatch(CnmgpError):
    pass


class NonPositiveLengthscale(CnmgpError):
    pass


class EmptyBatch(CnmgpError):
    pass


class LayoutMismatch(CnmgpError):
    pass


class DegenerateCovariance(CnmgpError):
    pass


class NonFiniteError(CnmgpError):
    def __init__(self, message, segment=None):
        super().__init__(message if segment is None else f"{message} [segment: {segment}]")
        self.segment = segment


def exit_code(err):
    if isinstance(err, ConfigError):
        return 1
    # ValueError here comes from dataset construction and validation
    if isinstance(err, (DataError, FileNotFoundError, ValueError)):
        return 2
    return 3
