"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class SwimCtlError(Exception):
    """Base class. ``stage`` names the pipeline stage that raised it."""

    stage: str | None = None

    def __init__(self, message: str = "", *, stage: str | None = None, **details):
        super().__init__(message)
        if stage is not None:
            self.stage = stage
        self.details = details

    def tagged(self, stage: str) -> "SwimCtlError":
        self.stage = stage
        return self


class InvalidGeometry(SwimCtlError):
    pass


class TagError(SwimCtlError):
    pass


class VolumeError(SwimCtlError):
    pass


class SolverError(SwimCtlError):
    pass


class CompatibilityError(SwimCtlError):
    pass


class ProjectionError(SwimCtlError):
    pass


class SmallDataError(SwimCtlError):
    pass


class ExtensionDiverged(SwimCtlError):
    pass


class GeometryError(SwimCtlError):
    pass


class AssemblyError(SwimCtlError):
    pass


class StabilizabilityError(SwimCtlError):
    pass


class FixedPointDiverged(SwimCtlError):
    pass


class ConfigError(SwimCtlError):
    """Invalid run configuration. ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class MeshFileError(SwimCtlError, OSError):
    """Unreadable or corrupted mesh file. Carries the offending path."""

    def __init__(self, message: str, path: str):
        SwimCtlError.__init__(self, f"{path}: {message}")
        self.path = path
