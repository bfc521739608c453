from typing import Dict, Optional


class ArtifactError(Exception):
    """
    Base class for every error raised by the sampling / synthesis modules.
    """


class InvalidArgumentError(ArtifactError, ValueError):
    """Argument outside the documented domain (bad index, zero dimension, length mismatch)."""


class MeshError(ArtifactError):
    """Object mesh is missing, unreadable or degenerate."""


class RegionError(ArtifactError):
    """No object vertex is reachable from a wrist site."""


class PairingError(ArtifactError):
    """A fingertip could not be paired with a contact vertex."""


class GenerationError(ArtifactError):
    """
    Grasp generation finished its attempt budget without accepting a candidate.
    """

    def __init__(self, message: str, rejections: Optional[Dict[str, int]] = None):
        """
        Args:
            message (str): Human readable description.
            rejections (dict, optional): Count of rejected attempts per reason.
        """
        super().__init__(message)
        self.rejections = dict(rejections or {})


class AlignmentError(ArtifactError):
    """Principal axis alignment is undefined for the vertex cloud."""


class SynthError(ArtifactError):
    """Scene synthesis could not produce a valid descriptor."""


class ConfigError(ArtifactError):
    """Configuration file or manifest is malformed or inconsistent."""


class SnapshotError(ArtifactError):
    """Weight-map snapshot has a bad header or length."""
