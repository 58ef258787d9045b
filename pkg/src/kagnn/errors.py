"""Exception types shared across the toolkit."""


class KagnnError(Exception):
    pass


class DimensionError(KagnnError, ValueError):
    """Raised when array shapes do not line up."""


class ConfigError(KagnnError, ValueError):
    """Raised for invalid hyperparameters, task/head pairings or datasets."""


class ContractError(KagnnError, RuntimeError):
    """Raised when an operation's precondition is violated by the caller."""


class DataError(KagnnError, ValueError):
    """Raised for unparseable or invariant-violating dataset files."""

    def __init__(self, message, line=None, record_id=None):
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if record_id is not None:
            prefix.append(f"record {record_id!r}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)
        self.line = line
        self.record_id = record_id


class UnstableTrainingError(KagnnError, ArithmeticError):
    """Raised when a run produces a non-finite loss."""


class SearchFailedError(KagnnError, RuntimeError):
    def __init__(self, message, trials=None):
        super().__init__(message)
        self.trials = trials or []
