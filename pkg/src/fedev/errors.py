"""Exception hierarchy shared by every module."""


class FedEVError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedEVError, ValueError):
    """Invalid configuration, dimensions or unsatisfiable settings."""


class ContractViolation(FedEVError, ValueError):
    """A caller broke an operation's precondition."""


class ProtocolError(FedEVError, RuntimeError):
    """Operations were invoked out of order or on inconsistent state."""


class DegenerateFeatureError(FedEVError, ArithmeticError):
    """A feature vector is too close to zero for a cosine similarity."""
