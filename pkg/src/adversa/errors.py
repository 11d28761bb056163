"""Exception hierarchy shared by every module."""


class AdversaError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AdversaError, ValueError):
    pass


class DegenerateSegmentError(AdversaError, ValueError):
    """A temporal segment is too short to yield a 16-frame clip."""


class ShapeError(AdversaError, ValueError):
    pass


class DomainError(AdversaError, ValueError):
    pass


class ConventionError(AdversaError, ValueError):
    """A latent in the wrong range convention was passed."""


class CompatibilityError(AdversaError, RuntimeError):
    """Artifacts produced under incompatible configs or schedules."""


class TrainingError(AdversaError, RuntimeError):
    pass


class UndefinedRegionError(AdversaError, ValueError):
    pass


class PathError(AdversaError, FileNotFoundError):
    pass


class InvariantViolation(AdversaError, AssertionError):
    pass
