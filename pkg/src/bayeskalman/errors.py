"""Exception types raised across the package."""


class BayesKalmanError(Exception):
    """Base class for all package errors."""


class ConfigError(BayesKalmanError, ValueError):
    """Invalid model, mismatch, training, or experiment configuration."""


class SimulationError(BayesKalmanError):
    """Non-finite values produced while simulating a trajectory."""

    def __init__(self, message, t=None, trajectory=None):
        super().__init__(message)
        self.t = t
        self.trajectory = trajectory


class NumericalError(BayesKalmanError, ArithmeticError):
    """Ill-conditioned or non-finite linear algebra."""

    def __init__(self, message, index=None, snapshot=None):
        super().__init__(message)
        self.index = index
        self.snapshot = snapshot


class UnrecoverableCovariance(NumericalError):
    """The observation Jacobian does not allow prior-covariance recovery from a gain."""


class DivergenceError(BayesKalmanError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
