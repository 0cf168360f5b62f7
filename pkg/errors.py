"""
Exception hierarchy for tilefuse
"""


class TileFuseError(ValueError):
    """Base class; subclasses ValueError so plain ValueError handlers still work"""


class RasterFormatError(TileFuseError):
    pass


class BandSelectionError(TileFuseError):
    pass


class GridError(TileFuseError):
    pass


class RleError(TileFuseError):
    pass


class DetectionFormatError(TileFuseError):
    pass


class FusionError(TileFuseError):
    pass


class MetricsError(TileFuseError):
    pass


class PlacementError(TileFuseError):
    pass


class ConfigError(TileFuseError):
    pass


class StageError(TileFuseError):
    """A pipeline stage failed; carries the stage name for the report"""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        self.message = message
        super().__init__(f"[{stage}] {message}")
