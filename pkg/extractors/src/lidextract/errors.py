class ExtractError(Exception):
    """Job-level configuration or I/O failure (aborts the run)."""


class UtteranceError(Exception):
    """Per-utterance failure: logged in the summary and skipped."""
