"""
Exception hierarchy shared by every splitcom module.
"""


class SplitComError(Exception):
    """Base class for all splitcom failures"""


class ShapeError(SplitComError, ValueError):
    """Tensor dimensions do not line up"""


class TokenIndexError(SplitComError, IndexError):
    """Token or class index outside the vocabulary"""


class StateError(SplitComError, RuntimeError):
    """An operation was called out of order (e.g. backward without forward)"""


class ConfigError(SplitComError, ValueError):
    """Invalid configuration value"""


class ModeError(SplitComError):
    """Operation not available in the current topology"""


class ProtocolError(SplitComError):
    """Violation of the split-training message protocol"""


class TrainingError(SplitComError):
    """Numerical failure during optimization"""


class TransportError(SplitComError):
    """The byte transport failed or timed out"""


class ComparisonError(SplitComError):
    """Runs cannot be compared with each other"""
