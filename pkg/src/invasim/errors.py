"""Exception types raised across the package."""


class InvasimError(Exception):
    """Base class for all package errors."""


class InvasionFails(InvasimError):
    """The invasion fitness r* = F_M(x*_R, 0) is not positive."""


class NoEquilibrium(InvasimError):
    """The resident-only system has no positive equilibrium."""


class StepFailure(InvasimError):
    """The ODE step size underflowed."""


class NoPeak(InvasimError):
    """The mutant coordinate of the flow never stops increasing."""


class EmptySample(InvasimError):
    pass


class InsufficientSurvivors(InvasimError):
    pass


class ConfigError(InvasimError):
    """Malformed or schema-violating experiment configuration."""
