"""Exception types raised across the package."""


class OffNetError(Exception):
    """Base class for all errors raised by offnet."""


class InvalidShapeError(OffNetError, ValueError):
    pass


class InvalidLabelError(OffNetError, ValueError):
    pass


class InvalidArgumentError(OffNetError, ValueError):
    pass


class ConfigurationError(OffNetError, ValueError):
    pass


class OutOfBoundsError(OffNetError, ValueError):
    pass


class FormatError(OffNetError, ValueError):
    pass
