"""Exception types raised across the package.

Everything derives from ``ValueError`` so callers that only care about bad
input can catch the builtin.
"""


class DualDitError(ValueError):
    pass


class ConfigError(DualDitError):
    pass


class LengthError(DualDitError):
    pass


class FormatError(DualDitError):
    pass


class UndefinedSNRError(DualDitError):
    pass


class UndefinedWERError(DualDitError):
    pass


class BoundsError(DualDitError):
    pass


class InfeasibleAlignmentError(DualDitError):
    pass


class DurationError(DualDitError):
    pass


class ShapeError(DualDitError):
    pass


class ConditioningError(ShapeError):
    pass


class ScheduleError(DualDitError):
    pass
