"""Exception types shared across the package."""


class SslprofError(Exception):
    """Base class for all package errors."""


class ValidationError(SslprofError):
    """Input data or configuration violates a documented invariant."""


class FormatError(SslprofError):
    """A binary file or sidecar is malformed."""


class ManifestError(ValidationError):
    """A dataset manifest fails validation; carries the violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("manifest validation failed:\n" + "\n".join(self.violations))


class TrainingDiverged(SslprofError):
    """The training loss became non-finite."""
