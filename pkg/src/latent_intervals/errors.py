"""Exception types shared across the package.

Invalid arguments raise the builtin :class:`ValueError`; the classes below
cover the remaining failure kinds that callers (notably the CLI) map to
distinct exit codes.
"""


class NumericalError(ArithmeticError):
    """Non-finite activations or losses encountered during evaluation."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class FormatError(OSError):
    """A binary artifact on disk has a malformed or unexpected header."""
