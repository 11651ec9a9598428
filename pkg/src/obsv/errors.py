"""Exception hierarchy shared by all obsv modules."""


class ObsvError(Exception):
    """Base class for every error raised by this package."""


class IntegrationDiverged(ObsvError):
    def __init__(self, node, message=None):
        self.node = node
        super().__init__(message or f"non-finite state at node {node}")


class GramianSingular(ObsvError):
    """Cholesky failed even after diagonal jitter.

    Usually means the persistence-of-excitation condition does not hold on
    the window, or the window is too short for double precision.
    """


class GridTooCoarse(ObsvError):
    pass


class ModelError(ObsvError):
    """Bad system definition (shapes, dependency restrictions)."""


class UnsupportedCheck(ObsvError):
    pass


class EvaluationError(ObsvError):
    def __init__(self, message, point=None):
        self.point = point
        super().__init__(message)


class ConfigError(ObsvError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field {field!r}")
        if line:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
