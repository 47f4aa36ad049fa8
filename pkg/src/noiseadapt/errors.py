"""Exception hierarchy. Every error the package raises derives from NoiseAdaptError
so the CLI can map failures to a single machine-parsable line."""


class NoiseAdaptError(Exception):
    """Base class for all package errors."""


# -- autodiff ---------------------------------------------------------------

class ShapeMismatch(NoiseAdaptError):
    pass


class NonFiniteValue(NoiseAdaptError):
    """An elementary op produced NaN/Inf; propagation is an error, not a state."""


class NotScalarLoss(NoiseAdaptError):
    pass


class DoubleBackward(NoiseAdaptError):
    """The tape is single-use; a second backward through it is a bug."""


class NonDeterministicSegment(NoiseAdaptError):
    """Checkpoint replay verification found a bit-level difference."""


# -- models / training ------------------------------------------------------

class TimestepOutOfRange(NoiseAdaptError):
    pass


class DivergedTraining(NoiseAdaptError):
    pass


# -- diffusion --------------------------------------------------------------

class InvalidRange(NoiseAdaptError):
    pass


class InvalidTimesteps(NoiseAdaptError):
    pass


class NegativeRadicand(NoiseAdaptError):
    pass


class EtaNonZero(NoiseAdaptError):
    pass


# -- noise optimization -----------------------------------------------------

class NonFiniteGradient(NoiseAdaptError):
    pass


class POutOfRange(NoiseAdaptError):
    pass


class ModeMismatch(NoiseAdaptError):
    pass


# -- stream / data ----------------------------------------------------------

class StreamTooShort(NoiseAdaptError):
    pass


class InvalidSpec(NoiseAdaptError):
    pass


class IoError(NoiseAdaptError):
    pass


class BadMagic(NoiseAdaptError):
    pass


class ShapeOverflow(NoiseAdaptError):
    pass


class EmptyRecords(NoiseAdaptError):
    pass


# -- metrics ----------------------------------------------------------------

class TooFewSamples(NoiseAdaptError):
    pass


class DimensionMismatch(NoiseAdaptError):
    pass


class EigenFailure(NoiseAdaptError):
    pass


class FrameTooSmall(NoiseAdaptError):
    pass


# -- configuration ----------------------------------------------------------

class ConfigError(NoiseAdaptError):
    pass
