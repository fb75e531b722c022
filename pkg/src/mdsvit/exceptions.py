"""Exception hierarchy shared by every subpackage."""


class MDSViTError(Exception):
    """Base class for all errors raised by mdsvit."""


class ShapeError(MDSViTError, ValueError):
    """Operands have incompatible or invalid extents."""


class AxisError(ShapeError):
    """A reduction or softmax axis does not exist for the operand."""


class RankError(ShapeError):
    """An operation needed a tensor of a different rank (e.g. a scalar loss)."""


class ConfigError(MDSViTError, ValueError):
    """Invalid hyperparameters or configuration keys."""


class DegenerateInputError(MDSViTError, ValueError):
    """Input makes a statistic undefined (zero variance, all-zero map, single class)."""


class AlignmentError(MDSViTError, ValueError):
    """Paired sequences (predictions / ground truth) do not line up."""


class ManifestError(MDSViTError):
    """Dataset directory is missing files or has orphans."""


class DecodeError(MDSViTError):
    """Image file is corrupt or truncated."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NonFiniteError(MDSViTError, FloatingPointError):
    """A loss or gradient became NaN/inf during training."""


class CheckpointError(MDSViTError):
    """Base class for checkpoint failures."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint is truncated or a payload checksum does not match."""
