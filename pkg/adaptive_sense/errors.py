class AdaptiveSenseError(RuntimeError):
    """Base class for everything this package raises on purpose."""


class ShapeError(AdaptiveSenseError, ValueError):
    pass


class NonFiniteError(AdaptiveSenseError, ValueError):
    pass


class DetachedError(AdaptiveSenseError):
    """The loss handed to backward() was not recorded on that tape."""


class NormalizationError(AdaptiveSenseError, ValueError):
    pass


class DomainError(AdaptiveSenseError, ValueError):
    """An argument is outside the domain an operator is defined on."""


class SamplerError(AdaptiveSenseError):
    pass


class EpisodeError(AdaptiveSenseError):
    pass


class DataError(AdaptiveSenseError):
    pass


class FormatError(DataError):
    pass


class ConfigError(AdaptiveSenseError):
    pass


class CheckpointError(AdaptiveSenseError):
    pass


class UnsupportedError(AdaptiveSenseError):
    pass


class SchemaError(AdaptiveSenseError):
    pass
