"""Exception hierarchy. CLI exit codes hang off these classes."""

from __future__ import annotations


class VidmemError(Exception):
    exit_code = 1


class ConfigError(VidmemError):
    exit_code = 2


class MediaError(VidmemError):
    exit_code = 3

    def __init__(self, message: str, stderr: str = "") -> None:
        super().__init__(message)
        self.stderr = stderr


class CacheError(VidmemError):
    exit_code = 3


class BackendError(VidmemError):
    exit_code = 4


class CaptionError(BackendError):
    def __init__(self, message: str, period=None) -> None:
        super().__init__(message)
        self.period = period


class ParseError(BackendError):
    pass


class OutOfRangeError(ParseError):
    """A returned period overlaps no candidate period."""


class UnknownTemplateError(BackendError):
    pass


class BudgetError(VidmemError):
    exit_code = 5


class TemplateError(VidmemError):
    exit_code = 2


class MembershipError(VidmemError):
    pass


class ExhaustedError(VidmemError):
    """No coarse or fine period is left to explore."""


class OverlapError(VidmemError):
    pass
