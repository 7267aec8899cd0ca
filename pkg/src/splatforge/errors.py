"""Exception types raised across the pipeline.

Everything derives from SplatforgeError so callers (and the CLI) can catch
validation problems with one except clause. Exit-code mapping lives in cli.py.
"""


class SplatforgeError(Exception):
    """Base class for all package errors."""


class ValidationError(SplatforgeError):
    """Bad inputs: shapes, ranges, malformed files, config mistakes."""


class RuntimeFailure(SplatforgeError):
    """Failures of execution rather than of input validation."""


# -- geometry / scene ------------------------------------------------------

class BehindCamera(ValidationError):
    """Point projects behind the image plane (camera-space z <= eps)."""


class NonPositiveDepth(ValidationError):
    """Unprojection requested with depth <= 0."""


class ZeroQuaternion(ValidationError):
    """Quaternion norm too small to normalize."""


class NonRigidTransform(ValidationError):
    """Pose rotation block is not orthonormal with det +1 (tol 1e-6)."""


class ShapeMismatch(ValidationError):
    """Array arguments disagree in shape or channel count."""


# -- renderer ---------------------------------------------------------------

class EmptyCloud(ValidationError):
    """Operation requires at least one splat / point."""


class DegenerateCovariance(RuntimeFailure):
    """Projected 2D covariance is singular or non-finite (NaN/overflow in params)."""


# -- depth init -------------------------------------------------------------

class TooFewValid(ValidationError):
    """Fewer than 2 valid pixels available for depth alignment."""


class ZeroVariance(ValidationError):
    """Depth alignment source has zero variance; scale is unrecoverable."""


class EmptyResult(RuntimeFailure):
    """An operation produced no output where some was required."""


# -- losses -----------------------------------------------------------------

class DegenerateInput(ValidationError):
    """Loss input is constant where variation is required (Pearson)."""


# -- diffusion --------------------------------------------------------------

class TimestepOutOfRange(ValidationError):
    """Timestep outside [0, T]."""


class TimestepOrder(ValidationError):
    """ddim_step requires t_prev <= t."""


class NaNDetected(RuntimeFailure):
    """Non-finite values appeared mid-computation; aborting."""


class RemoteFailure(RuntimeFailure):
    """Remote denoiser/codec call failed after retry (transport or non-2xx)."""

    def __init__(self, message, code=None):
        if code is not None:
            message = f"{message} [code={code}]"
        super().__init__(message)
        self.code = code


# -- trainer ----------------------------------------------------------------

class TrainingAborted(RuntimeFailure):
    """Optimization stopped early; message carries iteration and cause."""


class StageOrderError(ValidationError):
    """Stages run out of order (refine before inpaint, train before init)."""


class MalformedCheckpoint(ValidationError):
    """Checkpoint file failed version, key, or shape checks."""


# -- io ---------------------------------------------------------------------

class MalformedPly(ValidationError):
    """PLY parse failure; carries the byte offset where parsing stopped."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedGrid(ValidationError):
    """Occupancy grid file failed magic, version, or size checks."""


class MalformedPoseFile(ValidationError):
    """Pose file JSON failed schema or rigidity validation."""


class MissingRefPose(ValidationError):
    """Pose set must contain exactly one pose with role 'ref'."""


class ConfigError(ValidationError):
    """Pipeline config missing keys or holding out-of-range values."""
