"""Exception hierarchy shared across the package.

The CLI maps ValidationError/ParseError to exit code 1 (bad input) and
everything else derived from TriageError to exit code 2 (runtime failure).
"""

from __future__ import annotations


class TriageError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TriageError):
    """A precondition or configuration constraint was violated."""


class ParseError(ValidationError):
    """Malformed input data; carries a line number when one is known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(TriageError):
    """Training diverged or hit a non-finite loss; carries the epoch."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class BackendError(TriageError):
    """A predictor backend failed; carries stage/document context when known."""

    def __init__(self, message: str, *, stage: int | None = None, doc_id: str | None = None):
        parts = [message]
        if stage is not None:
            parts.append(f"stage={stage}")
        if doc_id is not None:
            parts.append(f"doc_id={doc_id}")
        super().__init__(" ".join(parts) if len(parts) == 1 else f"{message} ({', '.join(parts[1:])})")
        self.stage = stage
        self.doc_id = doc_id


class ProtocolError(TriageError):
    """A backend answered with a payload that violates the wire protocol."""


class RemapError(TriageError):
    """A backend span could not be mapped back to document coordinates."""

    def __init__(self, message: str, sentence: int | None = None):
        if sentence is not None:
            message = f"{message} (sentence {sentence})"
        super().__init__(message)
        self.sentence = sentence
