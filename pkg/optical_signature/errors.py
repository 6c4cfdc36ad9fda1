"""Exception hierarchy for the optical signature pipeline."""


class OpticalSignatureError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(OpticalSignatureError, ValueError):
    pass


class DegenerateInputError(InvalidArgumentError):
    """Input vector is all zeros, so its angle to anything is undefined."""


class LengthError(InvalidArgumentError):
    pass


class SchemaError(InvalidArgumentError):
    """A track, scene or key file does not match its documented format."""

    def __init__(self, message, field=None, line=None):
        location = []
        if field is not None:
            location.append(f"field '{field}'")
        if line is not None:
            location.append(f"line {line}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.field = field
        self.line = line


class TrackTooShortError(InvalidArgumentError):
    pass


class NumericFailureError(OpticalSignatureError, ArithmeticError):
    pass


class DecodeFailure(OpticalSignatureError):
    """Reed-Solomon decoding could not correct the codeword."""


class DegenerateHomographyError(OpticalSignatureError):
    pass


class VerificationError(OpticalSignatureError, RuntimeError):
    """A verification stage failed for the whole video."""

    reason = "verification"


class LocalizationError(VerificationError):
    reason = "localization"


class OutOfViewError(VerificationError):
    reason = "out_of_view"


class CellTooSmallError(OutOfViewError):
    reason = "cell_too_small"


class SyncError(VerificationError):
    reason = "sync"
