"""Exception types shared across the package."""


class QecError(Exception):
    """Base class for all qecnet errors."""


class ShapeMismatchError(QecError):
    """Array arguments do not have compatible shapes."""


class EmptyInputError(QecError):
    """An operation received an empty collection."""


class AllZeroWeightsError(QecError):
    """Every weight in a weighted average is zero."""


class DegenerateSpectrumError(QecError):
    """Top eigenvalue is not simple; the eigenvector gradient is undefined."""


class AllZeroActivationsError(QecError):
    """Routing received activations that are all zero."""


class NonOrthonormalInputError(QecError):
    """A matrix expected to be a proper rotation is not orthonormal."""


class DegeneratePatchError(QecError):
    """Patch covariance does not define a unique plane normal."""


class DegenerateTangentError(QecError):
    """No patch point has a usable tangential component for the second axis."""


class ParseError(QecError):
    """A geometry file could not be parsed."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class EmptyGeometryError(QecError):
    """A parsed file contains no usable geometry."""


class ZeroAreaError(QecError):
    """Mesh has no surface area to sample from."""


class TooManyRequestedError(QecError):
    """More samples requested than points available."""


class InsufficientPointsError(QecError):
    """Cloud does not have enough valid points for the network input."""


class BadTargetError(QecError):
    """Classification target index is out of range."""


class TrainingDivergedError(QecError):
    """Training produced a non-finite loss."""


class ConfigError(QecError):
    """A run configuration file failed schema validation."""
