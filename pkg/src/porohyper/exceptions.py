"""Exception hierarchy shared by all solver stages."""


class PorohyperError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(PorohyperError):
    pass


class MeshParseError(PorohyperError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PairingError(PorohyperError):
    def __init__(self, message, nodes=()):
        self.nodes = list(nodes)
        super().__init__(message)


class AssemblyError(PorohyperError):
    def __init__(self, message, cell=None):
        self.cell = cell
        super().__init__(message)


class SolverError(PorohyperError):
    pass


class ConvergenceError(SolverError):
    """Newton iteration failed; ``history`` holds the residual norms."""

    def __init__(self, message, history=(), fraction=None):
        self.history = list(history)
        self.fraction = fraction
        super().__init__(message)


class KinematicError(PorohyperError, ValueError):
    """Deformation gradient with non-positive determinant."""


class TangentError(SolverError):
    def __init__(self, message, component=None):
        self.component = component
        super().__init__(message)


class DegenerateParameterError(PorohyperError, ValueError):
    pass


class TrainingError(PorohyperError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class ConfigError(PorohyperError, ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
