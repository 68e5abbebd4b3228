"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MflqError(Exception):
    exit_code = 1


class ConfigError(MflqError):
    """Schema problems in a scenario file; ``errors`` holds ``(key_path, message)`` pairs."""

    exit_code = 2

    def __init__(self, errors):
        self.errors = list(errors)
        lines = [f"{path}: {msg}" for path, msg in self.errors]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))


class StructureError(MflqError, ValueError):
    """Coefficient data that is malformed (wrong shape, non-symmetric weights)."""

    exit_code = 2


class AssumptionError(MflqError):
    """Coefficients are well formed but violate a modelling precondition."""

    exit_code = 3

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class SingularityError(MflqError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class DivergenceError(MflqError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class VerificationError(MflqError):
    exit_code = 5
