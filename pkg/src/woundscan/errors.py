"""Exception hierarchy shared by all modules."""


class WoundScanError(Exception):
    """Base class for every error raised by the package."""


class InputError(WoundScanError, ValueError):
    """Malformed or out-of-contract input."""


class BehindCameraError(InputError):
    pass


class InsufficientOverlapError(WoundScanError):
    """Odometry found too few valid residuals to constrain a pose."""


class DegenerateCorrespondencesError(WoundScanError):
    pass


class InsufficientLandmarksError(WoundScanError):
    pass


class InvalidCornerDepthError(WoundScanError):
    pass


class NoOverlapError(WoundScanError):
    """ICP found no correspondence inside the distance gate."""


class RegistrationError(WoundScanError):
    """Wraps a per-frame registration failure with the frame index."""

    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"frame {frame_index}: {cause}")
        self.frame_index = frame_index
        self.cause = cause


class IncreaseSmoothnessError(WoundScanError):
    """Normal equations of the surface fit are singular."""


class EmptyMeshError(WoundScanError):
    pass


class EmptyRegionError(WoundScanError):
    pass


class WholeSurfaceLabeledError(EmptyRegionError):
    """The labeled region is closed and has no boundary."""


class EmptyFrameError(WoundScanError):
    pass


class UnsupportedOracleError(WoundScanError):
    pass


class DatasetLayoutError(WoundScanError):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
