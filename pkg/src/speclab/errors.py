"""Exception types raised by the laboratory.

Every error carries a stable ``code`` string so reports and the CLI can name
the failure without depending on the Python class.
"""


class LabError(Exception):
    code = "LAB_ERROR"

    def __str__(self):
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class InvalidProfile(LabError, ValueError):
    code = "INVALID_PROFILE"


class NonconvergentIntegration(LabError, RuntimeError):
    code = "NONCONVERGENT_INTEGRATION"


class ParabolicModel(LabError, ValueError):
    code = "PARABOLIC_MODEL"


class OutOfRange(LabError, ValueError):
    code = "OUT_OF_RANGE"


class SingularOrigin(LabError, ValueError):
    code = "SINGULAR_ORIGIN"


class NotPinching(LabError, ValueError):
    code = "NOT_PINCHING"


class NoPlateau(LabError, RuntimeError):
    code = "NO_PLATEAU"


class ResolutionTooCoarse(LabError, RuntimeError):
    code = "RESOLUTION_TOO_COARSE"


class Nonmonotone(LabError, RuntimeError):
    code = "NONMONOTONE"


class BadWindow(LabError, ValueError):
    code = "BAD_WINDOW"


class WindowExceedsGrid(LabError, ValueError):
    code = "WINDOW_EXCEEDS_GRID"


class WindowTouchesBoundary(LabError, ValueError):
    code = "WINDOW_TOUCHES_BOUNDARY"


class CurvatureViolation(LabError, ValueError):
    code = "CURVATURE_VIOLATION"


class SolverFailure(LabError, RuntimeError):
    code = "SOLVER_FAILURE"


class NonmonotoneExhaustion(LabError, RuntimeError):
    code = "NONMONOTONE_EXHAUSTION"


class EmptyBand(LabError, ValueError):
    code = "EMPTY_BAND"


class ConfigInvalid(LabError, ValueError):
    code = "CONFIG_INVALID"
