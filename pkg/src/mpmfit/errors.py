"""Exception types raised across the library."""


class MpmFitError(Exception):
    """Base class for all library errors."""


class NonPositiveSingularValue(MpmFitError):
    """Hencky strain requested for a decomposition with sigma <= 0."""


class IndexOutOfRange(MpmFitError):
    """Tangent seed index outside the active parameter vector."""


class InvalidPoisson(MpmFitError):
    """Poisson ratio outside the open interval (0, 0.5)."""


class UnsupportedFamily(MpmFitError):
    """Material family is declared but has no constitutive law."""


class InvertedElement(MpmFitError):
    """Deformation gradient with non-positive determinant."""

    def __init__(self, msg, particle_index=None):
        super().__init__(msg)
        self.particle_index = particle_index


class OutOfDomain(MpmFitError):
    """Particle too close to (or beyond) the background grid boundary."""

    def __init__(self, msg, particle_index=None):
        super().__init__(msg)
        self.particle_index = particle_index


class DegenerateViews(MpmFitError):
    """Fewer than three camera views for the interior test."""


class EmptyInput(MpmFitError):
    """Occupancy refinement received no points."""


class EmptyOccupancy(MpmFitError):
    """Particle sampling requested on an empty occupancy grid."""


class EmptySet(MpmFitError):
    """Point-set metric evaluated on an empty set."""


class ResolutionMismatch(MpmFitError):
    """Silhouette rasters of different sizes compared."""


class BehindCamera(MpmFitError):
    """Projection of a point at or behind the camera plane."""


class FrameMismatch(MpmFitError):
    """Trajectory does not cover the supervised observation frames."""


class NonFiniteLoss(MpmFitError):
    """Simulation diverged under the current parameters."""


class DivergedOptimization(MpmFitError):
    """Backtracking retries exhausted without a finite loss."""


class InvalidPermutation(MpmFitError):
    """Material swap permutation is not a bijection on object ids."""


class CollisionInfeasible(MpmFitError):
    """Scene generator found no colliding velocity assignment."""


class ShapeMismatch(MpmFitError):
    """Evaluation inputs disagree in object or frame counts."""


class ConfigError(MpmFitError):
    """Inconsistent configuration values."""
