"""Exception types shared across the package.

Every error the library raises deliberately derives from SeqMatchError, so
the CLI can turn any of them into a single-line diagnostic and a nonzero
exit code.
"""


class SeqMatchError(Exception):
    """Base class for all errors raised on purpose by this package."""


class DimensionError(SeqMatchError):
    """Operand extents are inconsistent (names both offending shapes)."""


class DegenerateMaskError(SeqMatchError):
    """A softmax slice or pooling window has no unmasked position."""


class ContractError(SeqMatchError):
    """A caller violated an operation's stated precondition."""


class InsufficientPoolError(SeqMatchError):
    """The negative-sampling pool is too small for the requested ratio."""


class EmptyTableError(SeqMatchError):
    """An embedding file contained no well-formed rows."""


class FormatError(SeqMatchError):
    """A binary or text artifact failed validation while being read."""


class ParseError(SeqMatchError):
    """A corpus or candidate file is malformed (carries the line number)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SeqMatchError):
    """A run-config file has unknown keys or invalid values."""


class TrainingDivergedError(SeqMatchError):
    """The training loss became non-finite (carries epoch and batch index)."""

    def __init__(self, message, epoch, batch_index):
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index})")
        self.epoch = epoch
        self.batch_index = batch_index
