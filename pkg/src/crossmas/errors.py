class EmptyRegionError(ValueError):
    """A mask or label map has no foreground where one is required."""


class HeaderError(ValueError):
    """An ``.mvol`` header is malformed or inconsistent with its data."""


class DivergedError(RuntimeError):
    """Registration produced a non-finite loss."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"loss became non-finite at iteration {iteration}")
