"""Exception types raised across the package."""


class QGFaceError(Exception):
    pass


class InvalidInputError(QGFaceError, ValueError):
    pass


class StateError(QGFaceError, RuntimeError):
    """An operation needs state that has not been set up yet."""


class ConfigurationError(QGFaceError, ValueError):
    pass


class ProtocolError(QGFaceError, ValueError):
    """An evaluation manifest violates the closed-set protocol."""


class IngestionError(QGFaceError, OSError):
    pass


class NumericError(QGFaceError, FloatingPointError):
    """Non-finite values appeared during training."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})
