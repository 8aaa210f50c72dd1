"""Exception types raised across the package."""


class ContractViolation(ValueError):
    """An input broke a documented precondition (e.g. non-unit quaternion)."""


class InvalidDepthError(ValueError):
    """A pixel has no usable depth and cannot be lifted to 3D."""


class EmptySceneError(ValueError):
    """An operation needs at least one Gaussian."""


class DegenerateQuaternionError(ValueError):
    """A warped orientation collapsed to (near) zero norm."""


class FrameUnusableError(RuntimeError):
    """A frame has no valid pixels left for fitting."""

    def __init__(self, message, frame_index=None):
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)
        self.frame_index = frame_index


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf."""

    def __init__(self, group):
        super().__init__(f"non-finite gradient in parameter group '{group}'")
        self.group = group


class SequenceFormatError(ValueError):
    """A sequence directory or file on disk is malformed."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class MissingFileError(SequenceFormatError):
    """A file the sequence layout requires does not exist."""


class MalformedPoseError(SequenceFormatError):
    """A pose file is not a 4x4 rigid transform."""


class IntrinsicsMismatchError(SequenceFormatError):
    """An image or flow file disagrees with the sequence intrinsics."""
