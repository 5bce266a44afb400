"""Exception hierarchy shared by all stages."""


class Sim3ReconError(Exception):
    """Base class for every error raised by this package."""


class LogSingularityError(Sim3ReconError, ValueError):
    """Rotation angle too close to pi for the principal logarithm."""

    def __init__(self, message="log branch singularity"):
        super().__init__(message)


class InsufficientCorrespondencesError(Sim3ReconError, ValueError):
    def __init__(self, message="insufficient correspondences"):
        super().__init__(message)


class DegenerateConfigurationError(Sim3ReconError, ValueError):
    def __init__(self, message="degenerate configuration"):
        super().__init__(message)


class NotAdjacentError(Sim3ReconError, ValueError):
    def __init__(self, message="not adjacent"):
        super().__init__(message)


class PipelineError(Sim3ReconError):
    """A pipeline stage failed. ``stage`` names it, ``where`` the chunk or edge."""

    def __init__(self, stage, message, where=None):
        self.stage = stage
        self.where = where
        loc = f" [{where}]" if where is not None else ""
        super().__init__(f"{stage}{loc}: {message}")


class GraphError(Sim3ReconError, ValueError):
    pass


class FormatError(Sim3ReconError, ValueError):
    """Malformed binary or text file."""
