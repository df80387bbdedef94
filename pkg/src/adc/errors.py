"""Exception hierarchy shared across the toolkit."""


class AdcError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AdcError):
    """Invalid or unresolvable project configuration."""


class TransportError(AdcError):
    """A remote call failed in a way that may succeed on retry."""

    retryable = True


class InsufficientOptionsError(AdcError):
    """A prompt completion yielded fewer distinct options than requested.

    Carries whatever was parsed so callers can inspect or retry with a
    different prompt.
    """

    def __init__(self, needed: int, options: list[str]):
        super().__init__(f"needed at least {needed} distinct options, got {len(options)}")
        self.needed = needed
        self.options = options


class FormatError(AdcError):
    """A file does not conform to its declared on-disk format."""


class TruncationError(FormatError):
    """File body is shorter than the header declares."""


class ZeroNormRowError(FormatError):
    """An embedding row has zero norm; cosine similarity is undefined."""


class AlignmentError(AdcError):
    """Inputs that must be row-aligned to the same manifest are not."""


class MissingClassError(AdcError):
    """A required class has no samples in the label vector."""


class NumericError(AdcError):
    """A numeric routine failed (bracket failure, divergence)."""
