class InvalidArgumentError(ValueError):
    """Bad shapes, out-of-range settings, violated preconditions."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class InstabilityError(NumericError):
    """Closed loop too unstable for a finite discounted value."""


class ConfigError(ValueError):
    """Malformed configuration file."""

    def __init__(self, message, *, key=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line
