"""
Exception hierarchy shared by every stage of the pipeline.
"""

from typing import Any, Dict, Optional


class StemEditError(Exception):
    """Base exception for stem editing errors."""
    pass


class InputError(StemEditError):
    """Raised when data or arguments handed to an operation are malformed."""
    pass


class ConfigurationError(StemEditError):
    """Raised for invalid, inconsistent or unknown configuration."""
    pass


class AudioIOError(InputError):
    """Raised when an audio file cannot be read or written."""
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class TranscodeError(AudioIOError):
    """Raised when ffmpeg fails to convert an input file."""
    def __init__(self, message: str, path: Optional[str] = None, stderr: str = ""):
        super().__init__(message, path)
        self.stderr = stderr


class TrackSkipped(StemEditError):
    """Signals that a track yielded no acceptable clip; callers move on."""
    def __init__(self, track_id: str, attempts: int):
        super().__init__(f"Track {track_id} skipped after {attempts} offset attempts")
        self.track_id = track_id
        self.attempts = attempts


class TrainingError(StemEditError):
    """Raised when training cannot continue, e.g. on a non-finite loss."""
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
