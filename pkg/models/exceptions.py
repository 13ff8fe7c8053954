"""
Error Types Module
Structured exceptions raised across the animation pipeline
"""


class AnimatorError(Exception):
    """Base class for all pipeline errors surfaced to the CLI"""


class ConfigError(AnimatorError, ValueError):
    """Unknown config key or unparsable value"""


class ShapeError(AnimatorError, ValueError):
    """Tensor shape violates an operation's contract"""


class ScheduleError(AnimatorError, ValueError):
    """Invalid noise schedule parameters or timestep"""


class DatasetError(AnimatorError):
    """Corpus cannot be written, read or sampled"""


class CheckpointError(AnimatorError):
    """Checkpoint container is missing, truncated or inconsistent"""


class TrainingDivergedError(AnimatorError):
    """Loss became NaN or infinite during optimization"""


class StageError(AnimatorError):
    """Wrong-stage batch or backward stage transition"""


class ModelStateError(AnimatorError):
    """Model state is untrained or missing parameters for the request"""
