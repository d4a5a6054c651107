"""Exception hierarchy.

Validation problems (bad shapes, bad configuration) derive from
:class:`ValidationError`; numerical failures (loss of rank, divergence,
destabilizing gains) derive from :class:`NumericalError`. The CLI maps the
two families to exit codes 1 and 2.
"""


class DDLQRError(Exception):
    """Base class for all package errors."""


class ValidationError(DDLQRError, ValueError):
    pass


class NumericalError(DDLQRError, ArithmeticError):
    pass


class ConfigInvalid(ValidationError):
    pass


class NotObservable(ValidationError):
    pass


class UnstableSpectrum(ValidationError):
    pass


class InconsistentInitialCondition(ValidationError):
    pass


class NonFinite(NumericalError):
    pass


class NotHurwitz(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class DegenerateEta0(NumericalError):
    pass


class SingularEtaKrylov(NumericalError):
    pass


class PlacementFailed(NumericalError):
    pass


class NotStabilizing(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class InsufficientExcitation(NumericalError):
    pass


class DestabilizedGain(NumericalError):
    pass


class Diverged(NumericalError):
    pass


class Unstable(NumericalError):
    pass
