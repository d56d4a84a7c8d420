"""16-bit PCM mono WAV reading and writing."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .spectral import Waveform


class WavFormatError(ValueError):
    pass


def read_wav(path: str | Path, expected_rate: int | None = None) -> Waveform:
    """Read a mono 16-bit PCM file.

    Resampling is not supported; a file whose rate differs from
    ``expected_rate`` is rejected.
    """
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(
            f"{path}: sample rate {rate} Hz does not match expected {expected_rate} Hz"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())
