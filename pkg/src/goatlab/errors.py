"""Exception hierarchy shared by every goatlab module."""


class GoatError(Exception):
    """Base class for all library errors."""


class ShapeError(GoatError, ValueError):
    """Operand shapes do not compose."""


class DomainError(GoatError, ValueError):
    """An argument lies outside the operation's domain."""


class NumericError(GoatError, ArithmeticError):
    """Non-finite values or an iteration that failed to converge."""


class ContractError(GoatError, RuntimeError):
    """A caller broke an inter-operation contract (e.g. a stale route)."""


class RunError(GoatError, RuntimeError):
    """A training run diverged."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(GoatError, ValueError):
    """Invalid run configuration; ``problems`` lists field-level messages."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems
