class CapacityError(RuntimeError):
    """Raised when exhaustive trajectory enumeration would exceed its budget."""


class SupportError(ValueError):
    """Raised when a behavior policy gives zero probability to an observed action."""


class PreconditionError(ValueError):
    """Raised when an MDP or policy does not satisfy an operation's requirements."""
