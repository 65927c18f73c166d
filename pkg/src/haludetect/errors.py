"""Exception hierarchy.

Every error raised on purpose by the package derives from ``HaluDetectError`` so the
CLI can map whole families onto exit codes.
"""

from __future__ import annotations


class HaluDetectError(Exception):
    """Base class."""


# -- configuration ---------------------------------------------------------


class ConfigError(HaluDetectError):
    pass


# -- data / input ----------------------------------------------------------


class DataError(HaluDetectError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class EmptyDocumentError(DataError):
    pass


class EmptyIndexError(DataError):
    pass


class NotEnoughRecordsError(DataError):
    pass


class DegenerateClassError(DataError):
    pass


class EmptySamplesError(DataError):
    pass


class InsufficientSamplesError(DataError):
    pass


# -- model / service backends ---------------------------------------------


class BackendError(HaluDetectError):
    pass


class TransportError(BackendError):
    pass


class ServiceUnavailableError(TransportError):
    pass


class RefusalError(BackendError):
    """The backend declined to answer (refusal or content filter)."""

    def __init__(self, message: str, text: str = ""):
        self.text = text
        super().__init__(message)


class MissingTranscriptError(BackendError):
    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint
        super().__init__(f"no scripted completion for prompt fingerprint {fingerprint}")


class DimensionMismatchError(BackendError):
    pass


class EmbeddingError(BackendError):
    pass


# -- confidence extraction -------------------------------------------------


class ConfidenceError(HaluDetectError):
    pass


class NoLogprobsError(ConfidenceError):
    pass


class AlignmentError(ConfidenceError):
    pass


# -- prompts ---------------------------------------------------------------


class PromptError(HaluDetectError):
    pass


class MissingBindingError(PromptError, KeyError):
    def __init__(self, *names: str):
        self.names = tuple(names)
        super().__init__(", ".join(names))

    def __str__(self) -> str:
        return "unbound placeholder(s): " + ", ".join(self.names)


class UnknownTemplateError(PromptError, LookupError):
    pass


class TemplateIntegrityError(PromptError):
    pass


# -- model-output parsing --------------------------------------------------


class OutputParseError(HaluDetectError):
    pass


class TripletParseError(OutputParseError):
    pass


class MalformedQueryError(OutputParseError):
    pass


class FormatError(OutputParseError):
    pass


class NoLabelError(OutputParseError):
    pass
