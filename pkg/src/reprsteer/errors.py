"""Exception hierarchy shared by every stage of the toolkit."""


class ReprSteerError(Exception):
    pass


class InputError(ReprSteerError, ValueError):
    """Caller supplied malformed data (bad token ids, empty inputs, shape mismatch)."""


class ConfigError(ReprSteerError, ValueError):
    """Invalid hyperparameters or inconsistent model/transform configuration."""


class ContractError(ReprSteerError, RuntimeError):
    """A lock or freeze guarantee was violated (e.g. the LM head drifted)."""


class NumericError(ReprSteerError, ArithmeticError):
    """Non-finite activations, losses or probabilities."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DependencyError(ReprSteerError, RuntimeError):
    """An upstream pipeline artifact is missing or stale."""


class PartialResultError(ReprSteerError, RuntimeError):
    """The input stream ran out before the requested quotas were met."""

    def __init__(self, message, positives=None, negatives=None):
        super().__init__(message)
        self.positives = list(positives or [])
        self.negatives = list(negatives or [])


class BenchmarkAborted(ReprSteerError, RuntimeError):
    def __init__(self, message, timings):
        super().__init__(message)
        self.timings = timings
