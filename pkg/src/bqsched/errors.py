"""Exception hierarchy shared across the package."""


class BQSchedError(Exception):
    pass


class InvalidArgument(BQSchedError, ValueError):
    """Argument outside its documented domain."""


class MissingDataError(BQSchedError, LookupError):
    """A log or calibration record needed by the computation is absent."""


class ProtocolError(BQSchedError, RuntimeError):
    """Environment or scheduler call made in an illegal state."""


class DataError(BQSchedError, ValueError):
    """Malformed persisted data (logs, checkpoints)."""


class ShapeError(BQSchedError, ValueError):
    pass
