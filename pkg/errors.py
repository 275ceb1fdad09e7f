"""
Exception hierarchy shared by every module.

Each error carries a stable ``code`` (its class name) so the CLI and the
metrics reports can surface it without string matching.
"""


class C2WError(Exception):
    """Root of all pipeline errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# volume-io
class MalformedHeader(C2WError, ValueError):
    pass


class SizeMismatch(C2WError, ValueError):
    pass


class NonFiniteData(C2WError, ValueError):
    pass


class InvalidMask(C2WError, ValueError):
    pass


class IoFailure(C2WError, OSError):
    pass


class EmptyMask(C2WError, ValueError):
    pass


# autodiff
class ShapeMismatch(C2WError, ValueError):
    pass


class GroupDivisibility(C2WError, ValueError):
    pass


class NotScalar(C2WError, ValueError):
    pass


class TapeConsumed(C2WError, RuntimeError):
    pass


# network
class InvalidSpec(C2WError, ValueError):
    pass


class SpecMismatch(C2WError, ValueError):
    pass


class ManifestMismatch(C2WError, ValueError):
    pass


class UnknownTag(C2WError, KeyError):
    pass


# training
class MissingGrad(C2WError, RuntimeError):
    pass


class OutOfRange(C2WError, ValueError):
    pass


class EmptySplit(C2WError, ValueError):
    pass


class Divergence(C2WError, ArithmeticError):
    pass


# metrics
class GeometryMismatch(C2WError, ValueError):
    pass


class NonPositiveTolerance(C2WError, ValueError):
    pass


# phantom / pipeline
class InvalidConfig(C2WError, ValueError):
    pass


class ConfigError(C2WError, ValueError):
    pass


class EmptyPrediction(C2WError, RuntimeError):
    pass


class CaseMismatch(C2WError, ValueError):
    pass


class MissingInput(C2WError, FileNotFoundError):
    """A command's precondition artifact (crops, checkpoint, dataset) is absent."""
