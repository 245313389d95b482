from typing import Optional


class NestedReftError(Exception):
    """Base class for every error raised by the nested-reft services."""


class ConfigurationError(NestedReftError, ValueError):
    pass


class DimensionError(NestedReftError, ValueError):
    pass


class TokenIndexError(NestedReftError, IndexError):
    pass


class ContractError(NestedReftError, ValueError):
    pass


class NumericError(NestedReftError, ArithmeticError):
    pass


class PromptLookupError(NestedReftError, KeyError):
    pass


class TrainingError(NestedReftError, RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None, phase: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.phase = phase

    def __str__(self) -> str:
        base = super().__str__()
        if self.step is None:
            return base
        return f"{base} (phase={self.phase}, step={self.step})"


# Process exit codes of the command-line harness
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_THEORY_FAIL = 3


def exit_code_for(error: BaseException) -> int:
    """Maps a service exception to the exit status reported by the CLI."""
    if isinstance(error, (ConfigurationError, ContractError)):
        return EXIT_USAGE
    return EXIT_RUNTIME
