"""Exception hierarchy. Each class knows the CLI exit code it maps to."""

from collections.abc import Iterable


class OrchardSegError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class UsageError(OrchardSegError):
    """Bad command-line usage."""

    exit_code = 1


class ConfigError(OrchardSegError, ValueError):
    """Invalid configuration value or config file."""

    exit_code = 1


class DataError(OrchardSegError, ValueError):
    """Input data violates an operation's preconditions."""

    exit_code = 2


class ParseError(DataError):
    """A file could not be parsed."""

    def __init__(self, message: str, *, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ShapeError(DataError):
    """Tensor or array shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.shapes = shapes
        listed = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class AssemblyError(DataError):
    """Block predictions do not cover the scene exactly once."""

    def __init__(self, message: str, indices: Iterable[int]):
        self.indices = list(indices)
        shown = self.indices[:20]
        more = f" (+{len(self.indices) - 20} more)" if len(self.indices) > 20 else ""
        super().__init__(f"{message}: {shown}{more}")


class MissingGradientError(DataError):
    """An optimizer step found a trainable parameter without a gradient."""


class NumericError(OrchardSegError):
    """Training produced a non-finite value."""

    exit_code = 3

    def __init__(self, message: str, *, epoch: int, batch: int, lr: float):
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        super().__init__(f"{message} (epoch={epoch}, batch={batch}, lr={lr:.6g})")
