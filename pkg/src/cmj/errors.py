"""Exception hierarchy shared by all modules."""


class CMJError(Exception):
    """Base class."""


class ConfigurationError(CMJError, ValueError):
    """Invalid parameters or unsupported combinations."""


class DomainError(CMJError, ValueError):
    """Argument outside the region where a quantity is defined."""


class NumericalError(CMJError, ArithmeticError):
    """A numerical procedure failed to reach its tolerance."""


class NotSupercriticalError(NumericalError):
    pass


class CriticalLineError(NumericalError):
    pass


class DegenerateCase(CMJError):
    """Both sigma and every rho vanish: the fluctuation is deterministic."""


class InsufficientDataError(CMJError):
    pass
