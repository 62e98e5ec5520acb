"""Exception hierarchy with the exit codes used by the command line front end.

Exit code table (also in the README):

  0  success
  2  configuration / geometry errors (bad domain, pole placement, margins,
     missing inputs, malformed config)
  3  linear solver / stencil / numerical construction failures
  4  degenerate transport field (reconstruction refused)
  5  incomplete characteristic coverage or unreadable boundary data
  6  positivity violation or zero-eigenvalue (spectral assumption) failures
  7  file format / I/O errors
"""


class QpatError(Exception):
    exit_code = 1


class ConfigError(QpatError):
    exit_code = 2


class InvalidDomainError(ConfigError):
    pass


class PolePlacementError(ConfigError):
    pass


class EmptyRegionError(ConfigError):
    pass


class GeometryError(ConfigError):
    pass


class PreconditionError(ConfigError):
    pass


class SolverError(QpatError):
    exit_code = 3


class StencilError(SolverError):
    pass


class AmplitudeError(SolverError):
    pass


class SemiclassicalRangeError(SolverError):
    """h too small for the dynamic range of the exponential weight."""


class SingularPhaseError(SolverError):
    pass


class DegenerateFieldError(QpatError):
    exit_code = 4


class CoverageError(QpatError):
    exit_code = 5

    def __init__(self, message, uncovered=None):
        super().__init__(message)
        self.uncovered = [] if uncovered is None else list(uncovered)


class BoundaryDataError(CoverageError):
    pass


class PositivityError(QpatError):
    exit_code = 6


class ZeroEigenvalueError(QpatError):
    exit_code = 6


class UnresolvableNodeError(QpatError):
    exit_code = 6


class FieldFormatError(QpatError):
    exit_code = 7


class DataIOError(QpatError):
    exit_code = 7
