class BDGLabError(Exception):
    """Base class for errors raised by the lab."""


class ConfigurationError(BDGLabError, ValueError):
    """Invalid grid, catalog identifier, or experiment configuration."""


class AlignmentError(BDGLabError, ValueError):
    """Two paths or a path and an auxiliary sequence do not share a grid."""


class UnsupportedTimeError(BDGLabError, ValueError):
    """Operation requested for a random time kind it does not cover."""
