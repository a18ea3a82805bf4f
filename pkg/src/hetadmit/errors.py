"""Exception hierarchy shared by every module."""


class HetAdmitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(HetAdmitError, ValueError):
    pass


class EmptyFleet(ConfigError):
    pass


class DuplicateName(ConfigError):
    pass


class NoDevices(ConfigError):
    pass


class InsufficientSamples(HetAdmitError, ValueError):
    pass


class DegenerateSamples(HetAdmitError, ValueError):
    pass


class DeviceInfeasible(HetAdmitError):
    """The device misses the SLO even at the smallest probed concurrency."""


class NoFeasiblePlan(HetAdmitError):
    pass


class UnderflowRelease(HetAdmitError):
    """A release arrived for a queue that has nothing in flight."""


class InvalidTopology(HetAdmitError, ValueError):
    pass


class InfeasibleProcessing(HetAdmitError, ValueError):
    pass


class ZeroThroughput(HetAdmitError, ValueError):
    pass


class ZeroConcurrency(HetAdmitError, ValueError):
    pass


class BindFailure(HetAdmitError):
    pass
