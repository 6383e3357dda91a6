"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """Invalid static configuration (grid, measure, model parameters)."""


class DomainError(ValueError):
    """Argument outside its admissible domain (times off grid, bad indices)."""


class UsageError(ValueError):
    """Inconsistent combination of otherwise valid objects (grid mismatch etc.)."""


class SimulationError(RuntimeError):
    """Numerical blow-up during forward simulation; message names path and step."""


class DegeneracyError(RuntimeError):
    """The exponential flow formula is invalid (1 + gamma_x <= 0 at a jump)."""


class EstimatorError(RuntimeError):
    """Conditional-expectation regression failed (singular or ill-conditioned)."""


class ConvergenceError(RuntimeError):
    """An iterative scheme exhausted its sweep budget without converging."""
