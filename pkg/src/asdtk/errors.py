"""Exception hierarchy shared across the toolkit.

Every error raised by library code derives from :class:`AsdtkError` so the
CLI can map "our" failures to exit code 2 with a clean message.
"""


class AsdtkError(Exception):
    """Base class for all toolkit errors."""


class GraphError(AsdtkError):
    """Invalid use of the autodiff graph (non-scalar target, bad operand)."""


class ShapeMismatchError(GraphError):
    """Operands of a graph node have incompatible shapes."""


class DspError(AsdtkError):
    """Invalid DSP configuration or input."""


class WavFormatError(DspError):
    """A WAV file could not be decoded.

    `offset` is the byte position in the file where decoding failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(AsdtkError):
    """A dataset manifest is malformed.

    `line` is the 1-based line number of the offending row, or None when the
    problem concerns the file as a whole.
    """

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CheckpointError(AsdtkError):
    """A checkpoint file is corrupt, truncated, or has the wrong version."""


class TrainingError(AsdtkError):
    """Training aborted (non-finite loss/gradient, bad configuration)."""


class EvalError(AsdtkError):
    """Metric computation over an invalid score set, or unknown class."""
