"""Exception classes shared across the package."""


class FibertraceError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(FibertraceError):
    """A matrix required to be symmetric positive definite is not."""


class InvalidDof(FibertraceError):
    """Wishart degrees of freedom outside the supported range (must exceed 2)."""


class DegenerateTensor(FibertraceError):
    """Principal direction requested from a tensor with a (near-)tied top eigenvalue.

    Only raised on request; the default API reports degeneracy as a flag.
    """


class ConfigError(FibertraceError):
    """Invalid user-supplied configuration."""


class SchemaError(FibertraceError):
    """A CSV file does not conform to its documented schema."""


class RankDeficientDesign(FibertraceError):
    """Gradient design matrix has rank below 6; the tensor is not identifiable."""


class SeedOutOfBounds(ConfigError):
    """A tracking seed voxel lies outside the image grid."""
