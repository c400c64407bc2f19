"""Exception types shared across the pipeline."""


class WavesplatError(Exception):
    """Base class for all library errors."""


class ConfigError(WavesplatError):
    """Invalid configuration or input description (CLI exit code 2)."""


class NumericalError(WavesplatError):
    """Numerical failure during computation (CLI exit code 3)."""


# volume
class SizeMismatch(ConfigError):
    pass


class UnreadableFile(ConfigError):
    pass


class DegenerateRange(ConfigError):
    pass


class IndexOutOfRange(WavesplatError):
    pass


# wavelet
class TooManyLevels(ConfigError):
    pass


class UnsupportedFilter(ConfigError):
    pass


class InconsistentPyramid(WavesplatError):
    pass


class InvalidBand(WavesplatError):
    pass


# bank
class EmptyKernel(NumericalError):
    pass


class DegenerateGaussian(NumericalError):
    pass


class UnknownBand(WavesplatError):
    pass


# sparsify
class StructureMismatch(WavesplatError):
    pass


class EmptySequence(WavesplatError):
    pass


# construct / render
class SingularCovariance(NumericalError):
    pass


class NotPD(NumericalError):
    pass


class NonExportableSplat(NumericalError):
    pass


class IoError(WavesplatError):
    pass


class ResolutionMismatch(WavesplatError):
    pass


class TooSmall(WavesplatError):
    pass


# finetune
class NonFiniteLoss(NumericalError):
    pass
