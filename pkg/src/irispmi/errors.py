"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all pipeline failures."""


class ManifestError(PipelineError, ValueError):
    pass


class MissingAnnotationError(PipelineError, ValueError):
    pass


class SplitError(PipelineError, ValueError):
    pass


class FingerprintMismatch(SplitError):
    pass


class BalanceError(PipelineError, ValueError):
    pass


class InventoryError(PipelineError, ValueError):
    pass


class ModelError(PipelineError, ValueError):
    pass


class TrainingError(PipelineError, RuntimeError):
    pass
