"""Shared exception types."""


class SceneFormatError(ValueError):
    """A scene file (SEMC1 or dataset voxel file) is malformed.

    Carries the byte offset at which the problem was detected when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointFormatError(ValueError):
    """A checkpoint container is malformed or has an unsupported version."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at training step {step}")
        self.step = step
