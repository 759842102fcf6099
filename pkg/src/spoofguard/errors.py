"""Exception types shared across the engine.

Every error raised by spoofguard derives from SpoofguardError so callers
(and the CLI) can distinguish data/model problems from bugs.
"""


class SpoofguardError(Exception):
    """Base class for all engine errors."""


# --- audio i/o ---

class MalformedWav(SpoofguardError):
    """RIFF/WAVE container is structurally broken or carries bad samples."""


class UnsupportedEncoding(SpoofguardError):
    """WAV encoding other than 16-bit PCM or 32-bit IEEE float."""


class SampleRateMismatch(SpoofguardError):
    """Input audio is not 16 kHz; the engine does not resample."""


class StreamClosed(SpoofguardError):
    """Byte stream was closed while a read was pending."""


class IoFailure(SpoofguardError):
    """Underlying OS-level read/write failed."""


# --- dsp / features ---

class EmptyClip(SpoofguardError):
    """Operation requires at least one audio sample."""


class TooShort(SpoofguardError):
    """Clip shorter than one analysis frame."""


class InvalidRange(SpoofguardError):
    """Filterbank frequency range is out of order or exceeds Nyquist."""


class ShapeMismatch(SpoofguardError):
    """Tensor or matrix shapes are incompatible with the operation."""


# --- autograd / models ---

class OddChannels(SpoofguardError):
    """Max-feature-map needs an even channel count to split in halves."""


class InvalidSpec(SpoofguardError):
    """Model spec violates the architecture table constraints."""


class BadMagic(SpoofguardError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(SpoofguardError):
    """Weight file format version is newer than this build understands."""


class ShapeTableMismatch(SpoofguardError):
    """Stored tensors do not match the architecture's layer table."""


class TruncatedFile(SpoofguardError):
    """File ended before the declared payload was complete."""


# --- training ---

class EmptySet(SpoofguardError):
    """Training or validation set has no items."""


class SingleClassTrainSet(SpoofguardError):
    """Training set must contain both bonafide and spoof items."""


# --- metrics ---

class SingleClass(SpoofguardError):
    """Score set must contain both bonafide and spoof records."""


class UndefinedMetric(SpoofguardError):
    """A precision/recall denominator is zero.

    The offending denominator ("tp+fp" or "tp+fn") is kept on the
    ``denominator`` attribute.
    """

    def __init__(self, message: str, denominator: str):
        super().__init__(message)
        self.denominator = denominator


# --- datasets ---

class BadLine(SpoofguardError):
    """Protocol or manifest line does not parse; carries ``line_no``."""

    def __init__(self, message: str, line_no: int):
        super().__init__(message)
        self.line_no = line_no


class DuplicateUtt(SpoofguardError):
    """Utterance id appears more than once in a protocol."""


class UnknownKey(SpoofguardError):
    """Protocol key is neither 'bonafide' nor 'spoof'."""


class TrialOutOfBounds(SpoofguardError):
    """Manifest trial span extends past the end of its audio file."""


# --- streaming ---

class ModelMissingThreshold(SpoofguardError):
    """Monitor needs a calibrated threshold or an explicit override."""
