########################
# Exception Hierarchy  #
########################

from typing import Iterable, Optional


class SRError(Exception):
    """
    Base exception class for super-resolution framework errors.

    All custom exceptions raised by the framework inherit from this class,
    allowing the command-line layer to handle them in one place.
    """
    pass


class ValidationError(SRError):
    """
    Raised when input validation fails.

    Triggered by tensors with the wrong shape, channel count or value range,
    LR/HR pairs that violate the scale contract, and out-of-bounds crops or patches.
    """
    pass


class ImageIOError(SRError):
    """
    Raised when an image cannot be read or written.

    Covers missing files, undecodable formats and images that are not 3-channel RGB.
    """
    pass


class ConfigurationError(SRError):
    """
    Raised when configuration is invalid.

    The message always names the offending key so the CLI can report it verbatim.
    """
    pass


class CheckpointError(SRError):
    """
    Raised when a checkpoint cannot be written, read or trusted.

    Used for corrupt files, format version mismatches and resume attempts whose
    configuration fingerprint differs from the checkpoint's.
    """
    pass


class TrainingError(SRError):
    """
    Raised when a training step produces a non-finite loss.

    Attributes:
        term (Optional[str]): Name of the offending loss term.
        step (Optional[int]): Step index at which the failure happened.
    """

    def __init__(self, message: str, term: Optional[str] = None, step: Optional[int] = None):
        super().__init__(message)
        self.term = term
        self.step = step


class MetricError(SRError):
    """
    Raised when a metric cannot be computed.

    Typical causes are images smaller than the SSIM window and missing LPIPS
    calibration weights.
    """
    pass


class DatasetError(SRError):
    """
    Raised for empty datasets or splits and malformed manifests.

    Attributes:
        rows (list[int]): 1-based row numbers of malformed manifest rows, if any.
    """

    def __init__(self, message: str, rows: Optional[Iterable[int]] = None):
        super().__init__(message)
        self.rows = list(rows or [])
