"""Exception hierarchy shared by all avsim modules."""


class AvsimError(Exception):
    """Base class for every error raised by this package."""


class NetworkError(AvsimError):
    """Road network file failed to parse or validate."""


class DemandError(AvsimError):
    """Demand configuration is invalid or infeasible."""


class OffRoadError(AvsimError):
    """A world point is farther from the route centerline than allowed."""


class RouteRangeError(AvsimError):
    """Arc length outside [0, route length], or unknown route id."""


class DegenerateGapError(AvsimError):
    """Car-following gap is non-positive; the caller treats this as a collision."""


class ProtocolError(AvsimError):
    """Environment API called out of order (step before reset, step after done)."""


class ConfigError(AvsimError):
    """A configuration file or value is invalid."""
