"""Exception types raised across the package."""

from __future__ import annotations

__all__ = [
    "FlowsplatError",
    "BadMagicError",
    "BehindCameraError",
    "EmptyCloudError",
    "MissingGroundTruthError",
    "NonPositiveDepthError",
    "NonZeroT3Error",
    "NoValidPixelsError",
    "NumericalDivergenceError",
    "SceneValidationError",
    "ShapeMismatchError",
    "StateMismatchError",
    "TruncatedFileError",
    "ZeroQuaternionError",
]


class FlowsplatError(Exception):
    """Base class for all package-specific errors."""


class NonPositiveDepthError(FlowsplatError):
    """A depth that must be strictly positive was zero or negative."""


class BehindCameraError(FlowsplatError):
    """A 3D point lies behind the camera plane (z <= 0 in camera frame)."""


class ZeroQuaternionError(FlowsplatError):
    """A quaternion with (near-)zero norm cannot be normalized."""


class EmptyCloudError(FlowsplatError):
    """An operation requires at least one Gaussian."""


class ShapeMismatchError(FlowsplatError):
    """Array arguments have inconsistent shapes."""


class NoValidPixelsError(FlowsplatError):
    """A reduction over valid pixels found none."""


class StateMismatchError(FlowsplatError):
    """Backward-pass inputs do not correspond to the forward-pass state."""


class NonZeroT3Error(FlowsplatError):
    """A closed form that requires t3 = 0 was given a translation with t3 != 0."""


class BadMagicError(FlowsplatError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFileError(FlowsplatError):
    """A binary file ended before the payload promised by its header."""


class MissingGroundTruthError(FlowsplatError):
    """A scene asset (depth, image, or flow file) is absent on disk."""


class SceneValidationError(FlowsplatError):
    """A scene manifest or its referenced files violate the schema."""


class NumericalDivergenceError(FlowsplatError):
    """Training produced a non-finite loss or parameter."""
