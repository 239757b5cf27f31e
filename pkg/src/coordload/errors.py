class CoordLoadError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CoordLoadError, ValueError):
    pass


class FetchError(CoordLoadError):
    """An item could not be fetched from any source."""


class IntegrityError(CoordLoadError):
    """A payload's fingerprint did not match the dataset's record."""


class MeasurementError(CoordLoadError):
    """Differential measurement phases produced inconsistent rates."""


class RegistrationError(CoordLoadError):
    pass


class ContractViolation(CoordLoadError):
    """A job acted outside its assigned responsibilities."""


class EpochAborted(CoordLoadError):
    pass
