"""Exception types raised by the toolkit.

Input/validation problems derive from ValueError (CLI exit code 2); failures
while running inference or benchmarks derive from RuntimeError (exit code 3).
"""


class EdgeAsrError(Exception):
    """Base class for all toolkit errors"""


# --- audio -----------------------------------------------------------------

class AudioReadError(EdgeAsrError, ValueError):
    """Audio file missing or not decodable"""


class UnsupportedEncodingError(EdgeAsrError, ValueError):
    """Audio is not PCM WAV, or its sample rate is outside 8-192 kHz"""


class EmptyAudioError(EdgeAsrError, ValueError):
    """Audio file contains zero samples"""


class DegenerateSignalError(EdgeAsrError, ValueError):
    """Signal power is zero everywhere, so levels in dB are undefined"""

    def __init__(self, message: str = "degenerate signal"):
        super().__init__(message)


# --- model -----------------------------------------------------------------

class ContainerFormatError(EdgeAsrError, ValueError):
    """Weight container is malformed or inconsistent with its config"""


class ShapeMismatchError(EdgeAsrError, ValueError):
    """Array shapes do not agree for the requested operation"""


# --- pipeline --------------------------------------------------------------

class CalibrationError(EdgeAsrError, ValueError):
    """Calibration input missing or unusable"""


class FilterInputError(EdgeAsrError, ValueError):
    """Manifest records lack data a filter stage requires"""


class InferenceError(EdgeAsrError, RuntimeError):
    """Inference failed while transcribing or benchmarking"""
