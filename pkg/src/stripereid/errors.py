"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for every failure raised by this package."""


# dataset / file formats
class MissingFile(EngineError):
    pass


class ParseError(EngineError):
    pass


class ValidationError(EngineError):
    pass


class BadMagic(EngineError):
    pass


class DimMismatch(EngineError):
    pass


class TruncatedFile(EngineError):
    pass


class NonFiniteValue(EngineError):
    pass


class InvalidSpec(EngineError):
    pass


# features
class IndivisibleHeight(EngineError):
    pass


# aware modules
class NormDegenerate(EngineError):
    pass


class MissingCache(EngineError):
    pass


# association
class EmptyTracklet(EngineError):
    pass


class UnknownTracklet(EngineError):
    pass


class UnknownSource(EngineError):
    pass


class SingleCamera(UserWarning):
    """Warning: cross-camera pairing requested on a single-camera bank."""


# trainer
class DatasetTooSmall(EngineError):
    pass


class ShapeMismatch(EngineError):
    pass


# evaluation
class PartCountMismatch(EngineError):
    pass


class MissingGroundTruth(EngineError):
    pass


class InsufficientCrossCameraIdentities(EngineError):
    pass
