"""Exception types shared across the package.

Everything raised on purpose derives from StmError so callers (and the CLI)
can distinguish our failures from genuine bugs.
"""


class StmError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ShapeError(StmError, ValueError):
    """An operand had the wrong shape; the message names the shapes involved."""


class NonFiniteError(StmError, ValueError):
    """A value that must be finite contained NaN or infinity."""


class GraphError(StmError, ValueError):
    """Misuse of the differentiation graph (non-scalar root, detached leaf, ...)."""


class ConfigError(StmError, ValueError):
    """A run configuration was rejected; the message names the offending key."""


class DataError(StmError, ValueError):
    """A dataset violated a precondition (class too small, bad split tag, ...)."""


class DivergenceError(StmError, ArithmeticError):
    """Training or unrolling produced a non-finite loss; names the epoch/step."""


class DegeneratePairError(StmError, ZeroDivisionError):
    """Two trajectory snapshots were (numerically) identical where distinct
    ones were required, so a match loss denominator vanished."""


class TrajectoryExhaustedError(StmError, IndexError):
    """An epoch index past the end of a teacher trajectory was requested."""


class FormatError(StmError, ValueError):
    """Base class for binary file corruption errors."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File has an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was complete."""


class ArchMismatchError(StmError, ValueError):
    """An artifact was produced under a different network architecture."""
