"""Extractor error hierarchy."""


class ExtractError(Exception):
    """Base class for everything this package raises on purpose."""


class UnknownArchitecture(ExtractError):
    """No shipped layer map and no user-provided one."""


class ShapeProbeError(ExtractError):
    """A mapped module did not behave as the map promises."""


class DatasetError(ExtractError):
    """Image folder unreadable, empty, or mislabeled."""


class MalformedHeader(ExtractError):
    """Bundle file does not start with a valid container header."""


class InvariantViolation(ExtractError):
    """Bundle payload breaks a documented invariant."""


class NoValidTriplet(ExtractError):
    """No anchor has both a same-class positive and a negative."""
