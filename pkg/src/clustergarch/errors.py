"""Exception hierarchy shared by every module."""


class ClusterGarchError(Exception):
    """Base class for all package errors."""


class InvalidInput(ClusterGarchError, ValueError):
    pass


class SingularMatrix(ClusterGarchError, ArithmeticError):
    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class ConvergenceFailure(ClusterGarchError, ArithmeticError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NotBlockStructured(ClusterGarchError, ValueError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class InvalidBlockCorrelation(ClusterGarchError, ValueError):
    pass


class InvalidSpec(ClusterGarchError, ValueError):
    pass


class QuadratureFailure(ClusterGarchError, ArithmeticError):
    def __init__(self, message, error_estimate=None):
        super().__init__(message)
        self.error_estimate = error_estimate


class DegenerateInformation(ClusterGarchError, ArithmeticError):
    pass


class FilterFailure(ClusterGarchError, ArithmeticError):
    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class EstimationFailure(ClusterGarchError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class IngestError(ClusterGarchError, ValueError):
    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = cells or []
