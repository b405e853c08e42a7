"""Waveform container, WAV input/output and ffmpeg transcoding."""
