"""Exception hierarchy shared across the package."""


class ManifoldKDError(Exception):
    pass


class DegenerateCloud(ManifoldKDError, ValueError):
    pass


class BadCount(ManifoldKDError, ValueError):
    pass


class NonOrthonormal(ManifoldKDError, ValueError):
    pass


class BadAngle(ManifoldKDError, ValueError):
    pass


class NegativeSigma(ManifoldKDError, ValueError):
    pass


class BadFraction(ManifoldKDError, ValueError):
    pass


class DegeneratePatch(ManifoldKDError, ValueError):
    pass


class ShapeMismatch(ManifoldKDError, ValueError):
    pass


class NonFinite(ManifoldKDError, FloatingPointError):
    pass


class NotScalar(ManifoldKDError, ValueError):
    pass


class TapeConsumed(ManifoldKDError, RuntimeError):
    pass


class BadTemperature(ManifoldKDError, ValueError):
    pass


class BadBins(ManifoldKDError, ValueError):
    pass


class LabelOutOfRange(ManifoldKDError, ValueError):
    pass


class EmptyTestSet(ManifoldKDError, ValueError):
    pass


class BadGrid(ManifoldKDError, ValueError):
    pass


class BadSpec(ManifoldKDError, ValueError):
    pass


class BadProtocol(ManifoldKDError, ValueError):
    pass


class ConfigError(ManifoldKDError, ValueError):
    pass


class SchemaMismatch(ManifoldKDError, ValueError):
    pass


class ParseError(ManifoldKDError, ValueError):
    """Malformed text file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)
