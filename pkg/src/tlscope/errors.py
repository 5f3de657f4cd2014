"""Exception types raised across the toolkit."""


class TlscopeError(Exception):
    """Base class for all toolkit errors."""


class MalformedHeader(TlscopeError):
    pass


class TruncatedHandshake(TlscopeError):
    pass


class GarbledLength(TlscopeError):
    pass


class MalformedDer(TlscopeError):
    pass


class UnknownKeyExchange(TlscopeError):
    pass


class MissingConfig(TlscopeError):
    pass


class EmptyTrainingSet(TlscopeError):
    pass


class SingleClassData(TlscopeError):
    pass


class NonFiniteFeature(TlscopeError):
    pass


class DimensionMismatch(TlscopeError):
    pass


class TooFewSamples(TlscopeError):
    pass


class UnknownLabel(TlscopeError):
    pass


class UnknownView(TlscopeError):
    pass


class EmptyWindow(TlscopeError):
    pass


class InvalidProfile(TlscopeError):
    pass
