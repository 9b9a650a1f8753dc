"""
Exception hierarchy shared by all modules of the tool.

Every error that the CLI is expected to report to a user derives from ``TransferAttackError`` so ``cli.main`` can
catch the whole family in one place.
"""


class TransferAttackError(Exception):
    """
    Base class of all errors raised on purpose by this package.
    """


class UsageError(TransferAttackError, ValueError):
    """
    Invalid arguments or configuration, unknown keys, refused experiments.
    """


class ShapeError(TransferAttackError, ValueError):
    """
    Shape mismatch detected by a tensor primitive or a consumer of tensors.
    """

    def __init__(self, op: str, detail: str):
        """
        :param op: Name of the operation that detected the mismatch.
        :param detail: Human readable description of the offending shapes.
        """
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class FormatError(TransferAttackError, ValueError):
    """
    A binary file (dataset, weights, UAP) does not follow the expected layout.
    """


class NumericalDomainError(TransferAttackError, ArithmeticError):
    """
    A value left the domain a formula is defined on.
    """


class TrainingError(TransferAttackError, RuntimeError):
    """
    Training diverged.
    """
