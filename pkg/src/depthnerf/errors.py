"""Exception types raised across the package."""


class DepthNerfError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(DepthNerfError):
    """A point lies behind or on the camera plane and cannot be projected."""


class ShapeMismatch(DepthNerfError):
    pass


class LengthMismatch(DepthNerfError):
    pass


class DegenerateWeights(DepthNerfError):
    """Occlusion-aware weights sum to (numerically) zero; no Gaussian can be fitted."""


class ParseError(DepthNerfError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class DivergenceDetected(DepthNerfError):
    """Training loss became non-finite."""

    def __init__(self, iteration: int, checkpoint_path=None):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
