"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes (see cli.EXIT_*), so new error
conditions should reuse one of the classes below rather than raising bare
ValueError from command entry points.
"""


class InvalidInputError(ValueError):
    """Bad user input: malformed config, missing file, illegal argument."""


class VolumeFormatError(InvalidInputError):
    """A .dsv container failed validation (magic, dtype tag, truncation)."""


class CheckpointFormatError(InvalidInputError):
    """A checkpoint container failed validation."""


class NonFiniteError(ArithmeticError):
    """A tensor value became NaN or infinite.

    Raised eagerly at the op that produced the value; non-finite data never
    propagates silently through the graph.
    """


class TrainingDivergenceError(NonFiniteError):
    """The training loss became non-finite."""


class InvariantViolationError(RuntimeError):
    """A declared dataset or model invariant failed at runtime."""
