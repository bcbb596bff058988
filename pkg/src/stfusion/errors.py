"""Exception types shared across the package."""


class StfusionError(Exception):
    """Base class for all package errors."""


class ConfigError(StfusionError, ValueError):
    """Inconsistent shapes, widths or parameters."""


class ProtocolError(StfusionError):
    """Malformed wire message; ``offset`` is the byte position where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class OrderingError(StfusionError):
    """A memory-bank update that does not advance the stored frame index."""


class ScenarioError(StfusionError, ValueError):
    """Scenario configuration that cannot be realized."""


class CheckFailure(StfusionError):
    """A verification check (gradient check, acceptance probe) exceeded its tolerance."""


class RunError(StfusionError):
    """A pipeline failure, annotated with the frame and agent being processed."""
