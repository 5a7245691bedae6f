"""Exception hierarchy shared by every subpackage."""


class TinyDistillError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TinyDistillError, ValueError):
    """Operand shapes are incompatible or an axis is out of range."""


class DomainError(TinyDistillError, ValueError):
    """An input value lies outside the operation's domain."""


class LengthError(TinyDistillError, ValueError):
    """A token sequence is longer than the model permits."""


class UsageError(TinyDistillError, RuntimeError):
    """The API was called in an invalid state or with an invalid request."""


class ConfigError(TinyDistillError, ValueError):
    """A configuration document or object fails validation."""


class NonFiniteError(DomainError):
    """A computation produced NaN or Inf."""


class ResampleSignal(TinyDistillError):
    """The sampled item cannot be realised; the caller should draw again."""
