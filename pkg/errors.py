"""
Error taxonomy for the ciGAN pipeline.

Every error carries the process exit code the CLI returns for it:
2 usage/config, 3 data, 4 numeric divergence.
"""


class CiganError(Exception):
    exit_code = 1


class UsageError(CiganError):
    exit_code = 2


class ConfigError(CiganError):
    """Invalid configuration. `field` is the dotted path of the offending key."""

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class CheckpointError(CiganError):
    exit_code = 2


class CheckpointIncompatibleError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DataError(CiganError):
    exit_code = 3


class InvalidInputError(DataError):
    pass


class SamplingStarvationError(DataError):
    def __init__(self, image_id, attempts):
        self.image_id = image_id
        self.attempts = attempts
        super().__init__(f"no patch of image '{image_id}' passed the tissue test after {attempts} attempts")


class MissingScoresError(DataError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"scores file not found: {path}")


class DegenerateStatisticsError(DataError):
    pass


class DivergenceError(CiganError):
    exit_code = 4

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
