"""Exception hierarchy.

Validation problems (bad inputs, bad files) derive from ``ValidationError`` so the
CLI can map them to exit code 2; everything else is a runtime failure.
"""

from __future__ import annotations


class MlatrError(Exception):
    """Base class for all package errors."""


class ValidationError(MlatrError):
    """Input data or configuration failed validation."""


# corpus


class UnknownLanguage(ValidationError):
    pass


class MalformedRecord(ValidationError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class DanglingCaption(MalformedRecord):
    pass


class DuplicateAudioId(MalformedRecord):
    pass


class UncaptionedAudio(ValidationError):
    pass


class TranslatorFailure(MlatrError):
    """One or more (audio_id, language) items could not be translated."""

    def __init__(self, failures: list[tuple[str, str, str]], partial=None):
        # failures: (audio_id, language, reason)
        self.failures = failures
        self.partial = partial
        shown = ", ".join(f"({a}, {lang})" for a, lang, _ in failures[:20])
        more = f" and {len(failures) - 20} more" if len(failures) > 20 else ""
        super().__init__(f"{len(failures)} translation(s) failed: {shown}{more}")


class MissingTranslation(MlatrError):
    pass


class BackendUnavailable(MlatrError):
    pass


# augment


class InsufficientTranslations(ValidationError):
    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        self.shortfall = requested - available
        super().__init__(
            f"requested {requested} translated pairs but only {available} available "
            f"(shortfall {self.shortfall})"
        )


# features


class TooShort(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class TooFewFrames(ValidationError):
    pass


# encoders


class ShapeMismatch(ValidationError):
    pass


class PluginUnavailable(MlatrError):
    pass


class DuplicateName(ValidationError):
    pass


class UnsupportedLanguage(ValidationError):
    pass


# retrieval core


class ZeroNormRow(MlatrError):
    def __init__(self, side: str, row: int):
        self.side = side
        self.row = row
        super().__init__(f"zero-norm row {row} in {side} matrix; cosine undefined")


class NonSquare(ValidationError):
    pass


class NonFinite(MlatrError):
    pass


# trainer


class UnsatisfiableConstraint(MlatrError):
    pass


class DivergedLoss(MlatrError):
    pass


class IncompatibleCheckpoint(ValidationError):
    pass


# evaluate


class EmptyRelevance(ValidationError):
    pass


class MissingLanguageFile(ValidationError):
    pass


class UnsupportedFormat(ValidationError):
    pass
