class WidenMergeError(Exception):
    """Base exception for everything the merge toolkit raises on purpose"""
    exit_code = 1


# ---- Configuration (exit 2) ----
class ConfigError(WidenMergeError):
    """Recipe or hyperparameter problem detected before any tensor is touched"""
    exit_code = 2


class ArityError(ConfigError):
    """Wrong number of models for the chosen method"""
    pass


class EmptyModelList(ConfigError):
    """No models were given to merge"""
    pass


# ---- Checkpoints (exit 3) ----
class CheckpointError(WidenMergeError):
    """Checkpoint cannot be opened, read or written"""
    exit_code = 3


class FormatError(CheckpointError):
    """Malformed safetensors header or shard index"""
    pass


class MissingShard(CheckpointError):
    """Shard index references a file that does not exist"""
    pass


class UnknownTensor(CheckpointError):
    """Requested tensor name is not in the checkpoint index"""
    pass


class UnsupportedRank(CheckpointError):
    """Only 1-D and 2-D tensors can be merged"""
    pass


class HomologyError(CheckpointError):
    """Checkpoints do not share tensor names / shapes with the backbone"""
    pass


# ---- Numerics (exit 4) ----
class NumericError(WidenMergeError):
    """Numeric failure while merging or analysing a tensor"""
    exit_code = 4


class InvalidTensor(NumericError):
    """Tensor contains NaN or Inf"""
    pass


class ShapeMismatch(NumericError):
    """Operands of a kernel do not have compatible shapes"""
    pass


class TooSmall(NumericError):
    """Input too short for the requested statistic"""
    pass


__all__ = [
    'WidenMergeError', 'ConfigError', 'ArityError', 'EmptyModelList',
    'CheckpointError', 'FormatError', 'MissingShard', 'UnknownTensor', 'UnsupportedRank', 'HomologyError',
    'NumericError', 'InvalidTensor', 'ShapeMismatch', 'TooSmall',
]
