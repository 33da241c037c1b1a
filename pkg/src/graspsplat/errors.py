"""Exception types shared across the engine."""


class GraspsplatError(Exception):
    """Base class for engine errors."""


class InvalidRotationError(GraspsplatError, ValueError):
    """Quaternion norm drifted beyond the renormalization tolerance."""


class DegenerateCovarianceError(GraspsplatError, ValueError):
    """Covariance matrix is singular or not positive definite."""


class BehindCameraError(GraspsplatError, ValueError):
    """Point is behind the camera near plane."""


class EmptySceneError(GraspsplatError, ValueError):
    """Render was asked to composite an empty Gaussian set."""


class ShapeError(GraspsplatError, ValueError):
    """Array shapes do not match the declared contract."""


class InvalidWeightsError(GraspsplatError, ValueError):
    """Skinning weight vector violates the simplex constraints."""


class GuidanceUnavailableError(GraspsplatError, RuntimeError):
    """Guidance oracle failed to produce a gradient image."""


class DivergenceError(GraspsplatError, RuntimeError):
    """Optimization loss exceeded the divergence threshold for too long."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class SceneSpecError(GraspsplatError, ValueError):
    """Synthetic scene specification is degenerate or inconsistent."""


class PlyParseError(GraspsplatError, ValueError):
    """Malformed PLY content; carries the offending header line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DegeneracyError(GraspsplatError, ValueError):
    """Convex hull input is collinear/coplanar within tolerance."""


class ConfigError(GraspsplatError, ValueError):
    """Run configuration file is malformed or inconsistent."""
