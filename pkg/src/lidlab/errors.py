"""Shared exception types."""


class ValidationError(ValueError):
    """Bad user input: malformed manifests, inconsistent configs, etc."""


class FormatError(ValueError):
    """A binary or text artifact does not conform to its file format."""
