"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numeric failures with 3, data / checkpoint / I/O problems with 4.
"""


class ConfigurationError(ValueError):
    """Invalid, inconsistent, or physically impossible configuration."""


class UnsupportedFrameworkError(ConfigurationError):
    """Operation is undefined for the selected framework (e.g. predictors in simclr)."""


class NumericFailure(RuntimeError):
    """Non-finite values or a violated numeric contract.

    Carries optional context: the transformer layer, the loss component,
    the offending batch row, or the last step record before an abort.
    """

    def __init__(self, message, *, layer=None, component=None, row=None, record=None):
        super().__init__(message)
        self.layer = layer
        self.component = component
        self.row = row
        self.record = record


class DataError(RuntimeError):
    """Dataset ingestion, decoding, or checksum failure."""


class CheckpointFormatError(RuntimeError):
    """Unreadable, corrupted, or version-mismatched checkpoint file."""


class TreeMismatchError(RuntimeError):
    """Two parameter trees that must match structurally do not."""
