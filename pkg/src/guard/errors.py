"""
Error hierarchy for the voice safety guard.

Every error carries the CLI exit code of its failure family:
1 internal, 2 usage, 3 I/O, 4 model/backend, 5 data-format.
"""

EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MODEL = 4
EXIT_DATA = 5


class GuardError(Exception):
    """Base class for all errors raised by the guard"""
    exit_code = EXIT_INTERNAL


# --- usage ---

class UsageError(GuardError):
    exit_code = EXIT_USAGE


class OutOfRange(GuardError):
    """A probability, threshold or step lies outside its allowed range"""
    exit_code = EXIT_USAGE


# --- I/O ---

class AudioReadError(GuardError):
    exit_code = EXIT_IO


class AuditWriteError(GuardError):
    exit_code = EXIT_IO


# --- model / backend ---

class BackendLoadFailure(GuardError):
    exit_code = EXIT_MODEL


class BackendInferenceError(GuardError):
    """The backend runtime failed while running a loaded model"""
    exit_code = EXIT_MODEL


class ShapeMismatch(GuardError):
    """Backend produced a tensor of unexpected shape"""
    exit_code = EXIT_MODEL


class TranscriptionUnsupported(GuardError):
    exit_code = EXIT_MODEL


class NonFiniteInput(GuardError):
    exit_code = EXIT_MODEL


class NonFiniteLoss(GuardError):
    exit_code = EXIT_MODEL


class HeadShapeError(GuardError):
    """Head parameters have the wrong dimensions or parameter count"""
    exit_code = EXIT_MODEL


# --- data format ---

class DataFormatError(GuardError):
    exit_code = EXIT_DATA


class MalformedContainer(DataFormatError):
    pass


class UnsupportedEncoding(DataFormatError):
    pass


class EmptyInput(DataFormatError):
    pass


class WrongRate(DataFormatError):
    pass


class WrongLength(DataFormatError):
    pass


class ChecksumMismatch(DataFormatError):
    pass


class EmptySequence(DataFormatError):
    pass


class EmptyClass(DataFormatError):
    pass


class TooFewSamples(DataFormatError):
    pass


class SingleClass(DataFormatError):
    pass


class LengthMismatch(DataFormatError):
    pass


class EmptyScores(DataFormatError):
    pass
