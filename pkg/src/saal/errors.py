"""Exception hierarchy shared across the package."""


class SaalError(Exception):
    pass


class DimensionError(SaalError, ValueError):
    pass


class NumericError(SaalError, ArithmeticError):
    pass


class ContractError(SaalError, ValueError):
    pass


class ConfigError(SaalError, ValueError):
    pass


class DegenerateGroupError(SaalError, ValueError):
    """A target group of coefficients sums to zero and cannot be normalised."""


class ParseError(SaalError, ValueError):
    pass


class TrainingError(SaalError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch

    def __reduce__(self):
        return type(self), (str(self), self.epoch)
