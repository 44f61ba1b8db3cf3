class AffordanceError(Exception):
    pass


class NumericsError(AffordanceError):
    pass


class ShapeMismatchError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class EmptyMaskError(NumericsError):
    pass


class DatasetError(AffordanceError):
    pass


class ManifestError(DatasetError):
    pass


class GenerationError(DatasetError):
    pass


class VocabularyError(AffordanceError):
    pass


class CheckpointError(AffordanceError):
    pass


class DiffusionError(AffordanceError):
    pass


class TrainingError(AffordanceError):
    pass


class NonFiniteLossError(TrainingError):
    pass


class TrainingHaltedError(TrainingError):
    pass


class ConfigError(AffordanceError):
    pass


class ExecutionError(AffordanceError):
    pass


class DepthError(ExecutionError):
    pass


class HeightSelectionError(ExecutionError):
    pass
