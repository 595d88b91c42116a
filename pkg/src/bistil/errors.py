"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataError`` (and its subclasses) to 2,
``TrainingError`` to 3, configuration/usage problems to 1.
"""


class BistilError(Exception):
    pass


class DimensionError(BistilError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(BistilError, ValueError):
    """Input lies outside an operation's domain (empty tensor, empty corpus, ...)."""


class ContractError(BistilError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(BistilError, ValueError):
    pass


class InputError(BistilError, ValueError):
    """Model inputs are invalid, e.g. token ids outside the vocabulary."""


class CompositionError(BistilError):
    """A sparse delta does not belong to the model it is applied to."""


class DataError(BistilError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(BistilError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
