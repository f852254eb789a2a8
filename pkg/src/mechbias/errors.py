"""Exception hierarchy.

Every error carries the CLI exit code it maps to (2 config, 3 data, 4 numeric)
and, once the CLI has caught it, the pipeline stage it came from.
"""

from __future__ import annotations

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class MechBiasError(Exception):
    exit_code = EXIT_DATA

    def __init__(self, message: str, *, subject: str | None = None):
        super().__init__(message)
        self.subject = subject
        self.stage: str | None = None


# configuration
class ConfigError(MechBiasError):
    exit_code = EXIT_CONFIG


# model bundles
class MissingTensor(MechBiasError):
    pass


class ShapeMismatch(MechBiasError):
    pass


class NonFiniteWeight(MechBiasError):
    exit_code = EXIT_NUMERIC


class DimTooSmall(MechBiasError):
    exit_code = EXIT_CONFIG


class InvalidSpec(MechBiasError):
    exit_code = EXIT_CONFIG


# engine
class EmptyInput(MechBiasError):
    pass


class LayerNotCaptured(MechBiasError):
    pass


# corpus
class UnknownRawGroup(MechBiasError):
    pass


class SchemaError(MechBiasError):
    def __init__(self, message: str, *, row: int | None = None, subject: str | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message, subject=subject)
        self.row = row


class GroupTooSmall(MechBiasError):
    pass


# probe
class DegenerateData(MechBiasError):
    exit_code = EXIT_NUMERIC


class DimensionMismatch(MechBiasError):
    exit_code = EXIT_NUMERIC


class EmptyTestSet(MechBiasError):
    pass


class UnknownClass(MechBiasError):
    pass


# analysis
class EmptyGroup(MechBiasError):
    pass


class NoBaselineErrors(MechBiasError):
    pass
