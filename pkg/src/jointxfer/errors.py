"""Exception types shared across the package.

The CLI maps these onto exit codes, so each family below is kept distinct:
configuration/usage problems, data problems, and numerical aborts.
"""


class JointXferError(Exception):
    """Base class for all package errors."""


class ConfigError(JointXferError, ValueError):
    """Invalid configuration value (bad rate, group count, missing field...)."""


class DimensionError(JointXferError, ValueError):
    """Tensor shapes do not agree with an operation's contract."""


class ContractError(JointXferError, RuntimeError):
    """A caller broke a precondition that is not about shapes or data."""


class DataError(JointXferError, ValueError):
    """Bad input data: out-of-range labels, unreadable files, empty manifests."""


class UnknownLabelError(DataError):
    pass


class MissingFileError(DataError):
    pass


class EmptyManifestError(DataError):
    pass


class TooShortError(DataError):
    """Signal or utterance is too short to produce a frame / segment."""


class CheckpointError(JointXferError):
    """Base class for checkpoint loading failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ArchMismatchError(CheckpointError):
    pass


class DivergenceError(JointXferError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good_iteration=None):
        super().__init__(message)
        self.last_good_iteration = last_good_iteration


class PipelineError(JointXferError):
    """A pipeline stage failed; ``stage_index`` is 1-based."""

    def __init__(self, message, stage_index):
        super().__init__(f"stage {stage_index}: {message}")
        self.stage_index = stage_index
