"""Exception types shared across the toolkit.

Everything user-correctable (bad shapes, bad configs, malformed files)
derives from ValidationError so the CLI can map it to exit code 1;
anything else is a runtime failure (exit code 2).
"""


class ValidationError(Exception):
    """Input rejected before any work was done."""


class ShapeError(ValidationError):
    """Array dimensions incompatible with the requested operation."""


class RangeError(ValidationError):
    """Coordinate or window outside the valid region."""


class ConfigError(ValidationError):
    """Malformed or inconsistent configuration."""


class FormatError(ValidationError):
    """File does not conform to its binary or text format."""


class TrainingError(Exception):
    """Non-recoverable failure inside the optimization loop."""


class GenerationError(Exception):
    """Synthetic data generation could not satisfy its constraints."""
