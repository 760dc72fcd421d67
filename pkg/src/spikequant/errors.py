"""Exception hierarchy shared by every stage of the toolkit."""


class SpikeQuantError(Exception):
    """Base class; ``exit_code`` is what the command line returns for it."""

    exit_code = 1


class ConfigError(SpikeQuantError, ValueError):
    exit_code = 2


class ModelConfigError(ConfigError):
    """Architecture parameters that cannot produce a valid network."""


class MissingArtifactError(SpikeQuantError, FileNotFoundError):
    exit_code = 3


class StaleArtifactError(SpikeQuantError):
    """An artifact was produced from a different config or predecessor."""

    exit_code = 4


class CheckpointError(SpikeQuantError):
    exit_code = 5


class MagicMismatchError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ShapeMismatchError(CheckpointError):
    pass


class QuantizationError(SpikeQuantError, ValueError):
    exit_code = 6


class UnsupportedBitError(QuantizationError):
    pass


class InvalidLayerError(QuantizationError, KeyError):
    pass


class SpecError(QuantizationError):
    """A bit assignment that is not total over the model's layers."""


class DatasetError(SpikeQuantError, ValueError):
    exit_code = 7


class TrainingDivergedError(SpikeQuantError, ArithmeticError):
    exit_code = 8


class IntegrityError(SpikeQuantError):
    """A report references an artifact that is missing or was modified."""

    exit_code = 9


class EvaluationError(SpikeQuantError):
    """Evaluator failure during a search, tagged with the cell it happened in."""

    exit_code = 10
