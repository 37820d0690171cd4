"""Exception taxonomy shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2,
InputError -> 3, NumericalError -> 4.  ContractError marks a broken
internal precondition and is allowed to surface as a traceback.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InputError(ValueError):
    """Missing or malformed input artifact."""


class NumericalError(ArithmeticError):
    """Training or evaluation produced non-finite values."""


class ContractError(ValueError):
    """An operation precondition was violated."""
