"""Exception hierarchy shared by all codec modules."""


class CodecError(Exception):
    """Base class for every error raised by this package."""


class EmptyInput(CodecError):
    """An operation received an empty signal or dataset."""


class InvalidSample(CodecError):
    """A waveform contained NaN or infinite samples."""


class ShapeError(CodecError):
    """Array dimensions are inconsistent with the active configuration."""


class UnsupportedFormat(CodecError):
    """An audio file or container is not in the one supported format."""


class InsufficientData(CodecError):
    """Not enough training material for the requested fit."""


class InvalidCode(CodecError):
    """A token index is outside the codebook range."""


class ContextError(CodecError):
    """A prediction context is inconsistent with the model's role."""


class TrainingDiverged(CodecError):
    """Model training produced a non-finite loss."""


class InvalidSymbol(CodecError):
    """A symbol handed to the entropy coder is out of range."""


class ModelMismatch(CodecError):
    """Bitstream was produced with a different model than supplied."""


class CorruptStream(CodecError):
    """A bitstream is truncated, mangled, or fails its checksum."""
