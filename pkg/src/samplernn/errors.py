"""Exception taxonomy shared across the package.

Every failure mode callers are expected to branch on gets its own class;
the CLI maps these onto exit codes (config -> 2, data -> 3, everything
internal -> 1).
"""


class SampleRnnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SampleRnnError):
    """Operand shapes or dtypes are incompatible."""


class ContractError(SampleRnnError):
    """A documented precondition was violated by the caller."""


class NumericError(SampleRnnError):
    """Non-finite values or degenerate numerical state."""


class ConfigError(SampleRnnError):
    """Invalid or inconsistent configuration."""


class DataError(SampleRnnError):
    """Corpus or input data is unusable."""


class WavFormatError(DataError):
    """A WAV file could not be parsed as 16-bit PCM."""


class CheckpointError(SampleRnnError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic or otherwise unparseable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before the declared payload."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the model it is loaded into."""
