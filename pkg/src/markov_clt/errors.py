"""Exception hierarchy shared by all modules."""


class MarkovCltError(Exception):
    """Base class for toolkit errors."""


class InvalidInputError(MarkovCltError, ValueError):
    """Malformed or out-of-contract input."""


class NumericalError(MarkovCltError, ArithmeticError):
    """A numerical routine failed or produced an inconsistent result."""


class UnstableStepError(InvalidInputError):
    """Time step violates the integrator's stability bound."""

    def __init__(self, message, suggested_dt):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class ReducibleChainError(InvalidInputError):
    """Generator matrix is not irreducible."""

    def __init__(self, message, classes):
        super().__init__(message)
        self.classes = classes


class HypothesisFailure(MarkovCltError):
    """An empirical hypothesis check failed hard (pipeline cannot continue)."""

    def __init__(self, hypothesis, message):
        super().__init__(f"[{hypothesis}] {message}")
        self.hypothesis = hypothesis


class FitRefused(HypothesisFailure):
    """Contraction fit could not be performed (signal at noise floor)."""

    def __init__(self, message):
        super().__init__("H1", message)


class ConfigError(InvalidInputError):
    """Configuration file violates the schema."""

    def __init__(self, message, key_path=None):
        super().__init__(message if key_path is None else f"{key_path}: {message}")
        self.key_path = key_path


class NDViolation(ConfigError):
    """Forcing set violates the non-degeneracy condition."""

    def __init__(self, clause, message):
        super().__init__(f"ND clause '{clause}' violated: {message}", "model.forcing_modes")
        self.clause = clause
