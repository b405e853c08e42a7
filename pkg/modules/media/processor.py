"""Input audio preparation: WAV passthrough and ffmpeg transcoding for other formats."""

import tempfile
from pathlib import Path
from typing import Union

import ffmpeg

from .audio_io import Waveform, read_wav
from ..errors import AudioIOError, TranscodeError
from ..utils.logger import get_logger

logger = get_logger(__name__)


class MediaProcessor:
    """Turns user-supplied audio files into mono waveforms at the codec sample rate."""

    SUPPORTED_AUDIO_FORMATS = {'.wav', '.mp3', '.aac', '.m4a', '.flac', '.ogg'}

    def __init__(self, sample_rate: int):
        self.sample_rate = sample_rate

    def supported_formats(self) -> list:
        """Get supported input formats."""
        return sorted(self.SUPPORTED_AUDIO_FORMATS)

    def _probe_file(self, file_path: Path) -> dict:
        """Probe an input file for its audio stream."""
        try:
            probe = ffmpeg.probe(str(file_path))
        except ffmpeg.Error as e:
            raise TranscodeError("FFmpeg could not probe file", str(file_path),
                                 e.stderr.decode('utf-8', 'replace') if e.stderr else "")
        streams = [s for s in probe.get('streams', []) if s.get('codec_type') == 'audio']
        if not streams:
            raise AudioIOError("No audio stream found", str(file_path))
        return streams[0]

    def needs_transcode(self, file_path: Path) -> bool:
        """WAV files are read directly; everything else goes through ffmpeg."""
        return file_path.suffix.lower() != '.wav'

    def transcode(self, input_path: Path, output_path: Path) -> Path:
        """Convert any supported input to mono 32-bit float WAV at the codec rate.

        Args:
            input_path: Source file
            output_path: Destination WAV

        Returns:
            Path: ``output_path``

        Raises:
            TranscodeError: If ffmpeg fails
        """
        stream_info = self._probe_file(input_path)
        logger.info(
            f"Transcoding {input_path.name} ({stream_info.get('codec_name', 'unknown')}, "
            f"{stream_info.get('sample_rate', '?')} Hz, {stream_info.get('channels', '?')} ch)"
        )
        try:
            stream = ffmpeg.input(str(input_path))
            stream = ffmpeg.output(stream, str(output_path), acodec='pcm_f32le',
                                   ac=1, ar=self.sample_rate)
            ffmpeg.run(stream, overwrite_output=True, capture_stdout=True, capture_stderr=True)
        except ffmpeg.Error as e:
            raise TranscodeError("FFmpeg transcoding failed", str(input_path),
                                 e.stderr.decode('utf-8', 'replace') if e.stderr else "")
        return output_path

    def load(self, file_path: Union[str, Path]) -> Waveform:
        """Load an input file as a waveform at the configured sample rate.

        Args:
            file_path: Path to a WAV or other supported audio file

        Returns:
            Waveform: Mono audio

        Raises:
            AudioIOError: If the file is missing or its format unsupported
        """
        file_path = Path(file_path)
        if not file_path.exists():
            raise AudioIOError("Input file not found", str(file_path))
        if file_path.suffix.lower() not in self.SUPPORTED_AUDIO_FORMATS:
            raise AudioIOError(f"Unsupported audio format {file_path.suffix}", str(file_path))

        if not self.needs_transcode(file_path):
            return read_wav(file_path, expected_rate=self.sample_rate)

        with tempfile.TemporaryDirectory() as tmp_dir:
            wav_path = self.transcode(file_path, Path(tmp_dir) / 'input.wav')
            return read_wav(wav_path, expected_rate=self.sample_rate)
