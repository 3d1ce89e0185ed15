"""Exception types shared across the pipeline."""

from __future__ import annotations


class FocusError(Exception):
    """Base class for all errors raised by this package."""


# --- geometry ---------------------------------------------------------------

class MaskShapeError(FocusError):
    """Mask dimensions do not match the image they are applied to."""


class BoxOutOfBoundsError(FocusError):
    """Box coordinates are degenerate or exceed the image bounds."""


class MissingMaskError(FocusError):
    """Segment-mask isolation was requested without a mask."""


class SpuriousMaskError(FocusError):
    """A mask was supplied to an isolation mode that must not consume one."""


# --- prompts / proposals ----------------------------------------------------

class EmptyPromptError(FocusError):
    """Task prompt is empty after trimming."""


class EmptyLabelError(FocusError):
    """Label normalization produced an empty string."""


class EmptyProposalError(FocusError):
    """No labels survived proposal parsing; signals a backend or prompt failure."""


# --- backends ---------------------------------------------------------------

class BackendUnavailableError(FocusError):
    """Backend could not be reached after the configured retries."""


class ProtocolError(FocusError):
    """Backend response did not match the wire protocol."""


class FixtureMissError(FocusError):
    """Mock backend has no fixture entry for the requested key."""


# --- evaluation -------------------------------------------------------------

class AnnotationParseError(FocusError):
    """Annotation document could not be parsed at all."""


class AnnotationSchemaError(FocusError):
    """Annotation document parsed but violates the expected schema."""


class CaseSetMismatchError(FocusError):
    """Result sets being compared do not cover the same cases."""


# --- orchestration ----------------------------------------------------------

class ConfigError(FocusError):
    """Run configuration is invalid or could not be loaded."""


class PipelineStageError(FocusError):
    """Wraps a failure with the pipeline stage it occurred in.

    ``stage`` is one of ``"input"``, ``"segment"``, ``"propose"``, ``"detect"``.
    The original exception is preserved as ``__cause__``.
    """

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
