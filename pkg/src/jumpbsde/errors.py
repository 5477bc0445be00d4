"""Exception hierarchy.

Every error raised on purpose by the package derives from ``JumpBSDEError`` so
callers (and the CLI) can separate model/numerical failures from bugs.
"""


class JumpBSDEError(Exception):
    """Base class for all package errors."""


class InvalidGridError(JumpBSDEError, ValueError):
    pass


class InvalidSpecError(JumpBSDEError, ValueError):
    pass


class ModelViolationError(JumpBSDEError, ValueError):
    pass


class NumericalBlowupError(JumpBSDEError, FloatingPointError):
    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class HypothesisViolationError(JumpBSDEError, ValueError):
    def __init__(self, message, hypothesis=None, witness=None):
        super().__init__(message)
        self.hypothesis = hypothesis
        self.witness = witness


class DimensionMismatchError(JumpBSDEError, ValueError):
    pass


class InvalidExponentError(JumpBSDEError, ValueError):
    pass


class InvalidComponentError(JumpBSDEError, ValueError):
    pass


class SingularRegressionError(JumpBSDEError, ArithmeticError):
    pass


class ImplicitStepError(JumpBSDEError, ArithmeticError):
    def __init__(self, message, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class NonContractionError(JumpBSDEError, ArithmeticError):
    def __init__(self, message, ratios=()):
        super().__init__(message)
        self.ratios = list(ratios)


class QuadratureError(JumpBSDEError, ArithmeticError):
    pass


class PreconditionError(JumpBSDEError, ValueError):
    pass


class SampleSizeError(JumpBSDEError, ValueError):
    pass


class ConfigError(JumpBSDEError, ValueError):
    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class CacheFormatError(JumpBSDEError, ValueError):
    pass


class GeneratorEvaluationError(JumpBSDEError, FloatingPointError):
    def __init__(self, message, inputs=None):
        super().__init__(message)
        self.inputs = inputs


class TransformOverflowError(JumpBSDEError, OverflowError):
    pass


class CacheCorruptionError(CacheFormatError):
    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class DegeneratePairError(JumpBSDEError, ValueError):
    pass
