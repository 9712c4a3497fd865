"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class BudgetForgeError(Exception):
    exit_code = 1


class ConfigError(BudgetForgeError, ValueError):
    exit_code = 2


class IngestionError(BudgetForgeError, ValueError):
    exit_code = 3


class StateError(BudgetForgeError, RuntimeError):
    exit_code = 4


class TrainingError(BudgetForgeError, RuntimeError):
    exit_code = 5

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (at index {index})")
        self.index = index


class ShapeError(BudgetForgeError, ValueError):
    exit_code = 6


class NumericError(BudgetForgeError, ArithmeticError):
    exit_code = 7


class DomainError(BudgetForgeError, ValueError):
    exit_code = 8


class BudgetError(StateError):
    """Raised when an action would overdraw the budget ledger."""
