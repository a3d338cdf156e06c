"""Exception hierarchy. CLI maps ValidationError to exit 1, RuntimeFailure to 2."""


class UwgenError(Exception):
    """Base class for all package errors."""


class ValidationError(UwgenError):
    """Bad inputs: config, paths, shapes, value ranges."""


class DecodeError(ValidationError):
    """Image file could not be decoded."""


class ParseError(ValidationError):
    """Label file line could not be parsed."""


class EmptyDatasetError(ValidationError):
    """A directory scan produced no images."""


class SplitError(ValidationError):
    """Dataset too small to split."""


class StratificationError(ValidationError):
    """A class is absent from the training split."""


class CheckpointError(ValidationError):
    """Checkpoint missing, malformed, or config-incompatible."""


class MissingArtifactError(ValidationError):
    """An upstream pipeline artifact is absent; names the producing command."""

    def __init__(self, message, producing_command=None):
        super().__init__(message)
        self.producing_command = producing_command


class RuntimeFailure(UwgenError):
    """Numerical or runtime failure during a job."""


class NonFiniteLossError(RuntimeFailure):
    """Training loss became NaN/Inf; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
