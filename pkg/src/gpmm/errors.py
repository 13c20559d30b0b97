"""Exception hierarchy shared across the package.

Two broad classes matter to callers: data problems (malformed files,
inconsistent topology, bad arguments derived from user data) and numerical
failures (degenerate decompositions, aborted samplers). The CLI maps them to
distinct exit codes.
"""


class GpmmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DataError(GpmmError):
    """Invalid or inconsistent input data."""

    exit_code = 3


class MeshFormatError(DataError):
    """Unparseable mesh file. Carries location information when available."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


class TopologyError(DataError):
    """Mesh connectivity violates a documented precondition."""


class NumericalError(GpmmError):
    """A numerical routine failed in a way retrying cannot fix."""

    exit_code = 4


class FitAbortError(NumericalError):
    """Sampler aborted. Diagnostics describe the chain state at abort."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)
