"""Exception hierarchy shared across the package."""


class FedcoxError(Exception):
    """Base class for all package errors."""


class ConfigError(FedcoxError):
    """Invalid or missing configuration."""


class DataError(FedcoxError):
    """Unusable input data (unreadable file, bad schema, empty cohort)."""


class NoEventsError(DataError):
    """A stratum contains censoring times only."""


class NumericalError(FedcoxError):
    """Numerical failure during optimisation."""


class SingularHessianError(NumericalError):
    """Hessian is singular or too ill-conditioned to invert.

    ``candidate`` identifies the model candidate when raised inside a
    multi-candidate run, so the caller can mark that candidate failed
    instead of aborting everything.
    """

    def __init__(self, message="singular Hessian", candidate=None):
        super().__init__(message)
        self.candidate = candidate


class LikelihoodOverflowError(NumericalError):
    """A non-finite intermediate occurred while evaluating the likelihood.

    Carries the offending coefficient vector in ``beta``.
    """

    def __init__(self, message, beta=None):
        super().__init__(message)
        self.beta = beta


class TransportError(FedcoxError):
    """Message validation or channel failure."""


class TransportTimeout(TransportError):
    """Expected senders did not report before the deadline."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class NodeError(FedcoxError):
    """A local node reported a failure; ``centre`` attributes it."""

    def __init__(self, message, centre=None):
        super().__init__(message)
        self.centre = centre
