"""Exception hierarchy shared across the package.

Validation failures (bad files, bad inputs) derive from ValidationError;
generation-transport failures derive from BackendError. The CLI maps the
former to exit code 2 and the latter to exit code 3.
"""
from __future__ import annotations


class WsigenError(Exception):
    """Base class for all package errors."""


class ValidationError(WsigenError):
    """Bad input data or configuration."""


class BackendError(WsigenError):
    """Text-generation backend failure."""


# -- corpus ------------------------------------------------------------------

class MissingFile(ValidationError):
    pass


class MalformedLine(ValidationError):
    def __init__(self, line_number: int, detail: str):
        super().__init__(f"manifest line {line_number}: {detail}")
        self.line_number = line_number


class DuplicateId(ValidationError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate record id {record_id!r}")
        self.record_id = record_id


class DimensionMismatch(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class BadMagic(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    def __init__(self, row: int, col: int):
        super().__init__(f"non-finite value at row {row}, col {col}")
        self.row = row
        self.col = col


# -- aggregator --------------------------------------------------------------

class NonFiniteIntermediate(WsigenError):
    pass


class BadWeightFile(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


# -- retrieval / context -----------------------------------------------------

class EmptyInput(ValidationError):
    pass


class EmptyIndex(ValidationError):
    pass


class MissingGuideline(ValidationError):
    def __init__(self, category: str):
        super().__init__(f"no guideline cached for category {category!r}")
        self.category = category


class MissingFeedback(ValidationError):
    def __init__(self, record_id: str):
        super().__init__(f"no feedback stored for record {record_id!r}")
        self.record_id = record_id


class InconsistentBundle(ValidationError):
    pass


class TooManyReports(ValidationError):
    pass


class MissingStore(ValidationError):
    def __init__(self, flag: str):
        super().__init__(f"mechanism {flag!r} is enabled but its store is missing")
        self.flag = flag


# -- genclient ---------------------------------------------------------------

class UnknownKind(ValidationError):
    pass


class NoNnContext(BackendError):
    pass


class TransientBackendError(BackendError):
    """Retryable: timeouts, connection drops, 429 and 5xx statuses."""


class Timeout(TransientBackendError):
    pass


class HttpStatus(BackendError):
    def __init__(self, code: int, body: str = ""):
        super().__init__(f"HTTP status {code}: {body[:200]}")
        self.code = code

    def is_transient(self) -> bool:
        return self.code == 429 or self.code >= 500


class MalformedResponse(BackendError):
    pass


class ExhaustedRetries(BackendError):
    pass


# -- metrics -----------------------------------------------------------------

class EmptyReference(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class ExtractorUnavailable(WsigenError):
    pass
