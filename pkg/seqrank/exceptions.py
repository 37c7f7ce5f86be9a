"""
Exceptions raised across the seqrank app.

Every error carries a message naming the offending object (shape, parameter,
node id, config key) so a management command can surface it as a one-line
diagnosis.
"""


class SeqrankError(Exception):
    """Base class for all seqrank errors."""


class ConfigError(SeqrankError, ValueError):
    """Invalid, unknown or inconsistent configuration value."""


class ShapeError(SeqrankError, ValueError):
    """Tensor extents do not match an operation's contract."""


class NumericalError(SeqrankError, ArithmeticError):
    """Non-finite loss or an undefined numerical result."""


class TemporalOrderError(SeqrankError, ValueError):
    """An action is dated after the reference time it is encoded against."""


class EmptyInputError(SeqrankError, ValueError):
    """A user has no actions available at the requested cut time."""


class SkipBatch(SeqrankError):
    """A batch produced zero contributing (position, target) pairs."""


class MissingGradientError(SeqrankError, ValueError):
    """An optimizer step was requested for a parameter without a gradient."""


class CheckpointError(SeqrankError, ValueError):
    """A checkpoint file is malformed or does not match the model."""


class GraphError(SeqrankError, ValueError):
    """Malformed serving operator graph."""


class GraphCycleError(GraphError):
    """The serving operator graph contains a cycle."""


class PlacementError(SeqrankError, ValueError):
    """A placement assigns a node to a device it cannot run on."""


class UndefinedMetricError(SeqrankError, ValueError):
    """A metric is undefined for the given input (e.g. single-class AUC)."""
