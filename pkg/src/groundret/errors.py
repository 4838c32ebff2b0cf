"""Exception types shared across the toolkit.

Each carries the CLI exit code it maps to.
"""


class GroundRetError(Exception):
    exit_code = 3


class InvalidArgument(GroundRetError, ValueError):
    exit_code = 2


class ResourceLimitError(GroundRetError):
    exit_code = 3


class OutOfBoundsError(GroundRetError, ValueError):
    exit_code = 3


class ParseError(GroundRetError, ValueError):
    exit_code = 3


class EmptyDatasetError(GroundRetError):
    exit_code = 3


class FormatVersionError(GroundRetError):
    exit_code = 3


class DependencyError(GroundRetError):
    exit_code = 3


class TrainingDivergence(GroundRetError):
    exit_code = 4

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
