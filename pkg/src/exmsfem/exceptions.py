"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`MsFEMError`
and carries a short ``category`` string that the command line interface maps
to its exit code.
"""


class MsFEMError(Exception):
    category = "error"
    exit_code = 1


class InvalidGrid(MsFEMError, ValueError):
    category = "grid"
    exit_code = 2


class NestingError(InvalidGrid):
    category = "nesting"


class ConfigError(MsFEMError, ValueError):
    category = "config"
    exit_code = 3


class CompatibilityError(MsFEMError, ValueError):
    category = "compatibility"
    exit_code = 4


class DegenerateCoefficient(MsFEMError, ValueError):
    """Raised when a k-weighted cell mass matrix is (numerically) singular."""

    category = "degenerate-coefficient"
    exit_code = 5

    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = cells


class DegenerateBasis(MsFEMError, ValueError):
    category = "degenerate-basis"
    exit_code = 5

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class OversampleError(DegenerateBasis):
    category = "oversample"


class SolverError(MsFEMError, RuntimeError):
    category = "solver"
    exit_code = 6

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class DomainError(MsFEMError, ValueError):
    category = "domain"
    exit_code = 7


class CFLError(MsFEMError, ValueError):
    category = "cfl"
    exit_code = 7

    def __init__(self, message, limit=None):
        super().__init__(message)
        self.limit = limit
