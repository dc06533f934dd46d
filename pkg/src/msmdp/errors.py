"""Exception types shared across the package."""


class MsmdpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MsmdpError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(MsmdpError, RuntimeError):
    """A linear solve or eigensolve failed or left an unacceptable residual."""


class NoCutError(MsmdpError):
    """Every sweep cut was degenerate (one side empty)."""


class ParseError(MsmdpError, ValueError):
    """A serialized artifact is malformed; the message names the bad field."""
