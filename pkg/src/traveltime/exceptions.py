"""Exception hierarchy.

Everything raised on bad input derives from :class:`TravelTimeError`, which is
itself a ``ValueError`` so callers that only care about "bad data" can catch
the builtin.
"""


class TravelTimeError(ValueError):
    """Base class for all data and contract errors in this package."""


# network
class DuplicateEdge(TravelTimeError):
    pass


class DanglingSuccessor(TravelTimeError):
    pass


class NonPositiveLength(TravelTimeError):
    pass


class Disconnected(TravelTimeError):
    pass


class NoSuccessor(TravelTimeError):
    pass


class NonConvergent(TravelTimeError):
    pass


class InvalidRoute(TravelTimeError):
    pass


# simulator
class InvalidSpec(TravelTimeError):
    pass


# ingest
class NonAdjacentJump(TravelTimeError):
    pass


class InvalidTrip(TravelTimeError):
    pass


# estimation
class TooFewTrips(TravelTimeError):
    pass


class InvalidLevel(TravelTimeError):
    pass


class EmptyTraining(TravelTimeError):
    pass


class NoEligibleTrips(TravelTimeError):
    pass


class NonPositiveVariance(TravelTimeError):
    pass


class DegenerateVariance(TravelTimeError):
    pass


class RankDeficient(TravelTimeError):
    pass


# evaluation
class IdMismatch(TravelTimeError):
    pass


class EmptyInput(TravelTimeError):
    pass
