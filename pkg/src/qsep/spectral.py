"""STFT analysis/synthesis, masking and ideal-binary-mask targets.

Frames are laid out as ``(frames, bins)``. Every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("waveform is empty")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    complex_bins: np.ndarray
    fft_size: int
    hop: int
    window_size: int
    sample_rate: int
    magnitude: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bins = np.asarray(self.complex_bins, dtype=np.complex128)
        if bins.ndim != 2:
            raise ValueError(f"complex_bins must be frames x bins, got shape {bins.shape}")
        if bins.shape[1] != self.fft_size // 2 + 1:
            raise ValueError(
                f"expected {self.fft_size // 2 + 1} bins for fft_size={self.fft_size}, "
                f"got {bins.shape[1]}"
            )
        if not np.all(np.isfinite(bins)):
            raise ValueError("spectrogram contains non-finite entries")
        object.__setattr__(self, "complex_bins", bins)
        object.__setattr__(self, "magnitude", np.abs(bins))

    @property
    def shape(self) -> tuple[int, int]:
        return self.complex_bins.shape

    def same_geometry(self, other: "Spectrogram") -> bool:
        return (
            self.shape == other.shape
            and self.fft_size == other.fft_size
            and self.hop == other.hop
            and self.window_size == other.window_size
        )


@dataclass(frozen=True)
class Mask:
    values: np.ndarray
    kind: str = "soft"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"mask must be frames x bins, got shape {values.shape}")
        if self.kind == "binary":
            if not np.all((values == 0.0) | (values == 1.0)):
                raise ValueError("binary mask must contain only 0 and 1")
        elif self.kind == "soft":
            if not np.all((values >= 0.0) & (values <= 1.0)):
                raise ValueError("soft mask values must lie in [0, 1]")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        object.__setattr__(self, "values", values)


def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window (the COLA-friendly variant)."""
    n = np.arange(size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)


def _check_sizes(fft_size: int, hop: int, window_size: int) -> None:
    if fft_size <= 0 or hop <= 0 or window_size <= 0:
        raise ValueError(
            f"sizes must be positive (fft_size={fft_size}, hop={hop}, window_size={window_size})"
        )
    if window_size > fft_size:
        raise ValueError(f"window_size {window_size} exceeds fft_size {fft_size}")
    if hop > window_size:
        raise ValueError(f"hop {hop} exceeds window_size {window_size}")


def check_cola(window_size: int, hop: int) -> None:
    # periodic Hann overlap-adds to a constant iff the hop divides the window at least twice
    if window_size % hop != 0 or window_size // hop < 2:
        raise ValueError(
            f"hop={hop} with window_size={window_size} violates the constant-overlap-add condition"
        )


def frame_layout(n_samples: int, hop: int, window_size: int) -> tuple[int, int, int]:
    """Return ``(n_frames, pad_left, pad_right)`` for a signal of ``n_samples``.

    Both ends get at least ``window_size - hop`` zeros so every sample is
    covered by the same number of frames.
    """
    pad_left = window_size - hop
    n_frames = -(-(n_samples + pad_left) // hop)
    total = (n_frames - 1) * hop + window_size
    return n_frames, pad_left, total - pad_left - n_samples


def stft(
    w: Waveform, fft_size: int = 512, hop: int = 128, window_size: int | None = None
) -> Spectrogram:
    window_size = fft_size if window_size is None else window_size
    _check_sizes(fft_size, hop, window_size)
    n_frames, pad_left, pad_right = frame_layout(len(w), hop, window_size)
    padded = np.concatenate([np.zeros(pad_left), w.samples, np.zeros(pad_right)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_size)[::hop]
    assert frames.shape[0] == n_frames
    bins = np.fft.rfft(frames * hann_window(window_size), n=fft_size, axis=1)
    return Spectrogram(bins, fft_size, hop, window_size, w.sample_rate)


def istft(s: Spectrogram, out_len: int) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft` (squared-window normalised)."""
    check_cola(s.window_size, s.hop)
    if out_len <= 0:
        raise ValueError(f"out_len must be positive, got {out_len}")
    n_frames, pad_left, pad_right = frame_layout(out_len, s.hop, s.window_size)
    if s.shape[0] != n_frames:
        raise ValueError(
            f"spectrogram has {s.shape[0]} frames but out_len={out_len} implies {n_frames}"
        )
    window = hann_window(s.window_size)
    frames = np.fft.irfft(s.complex_bins, n=s.fft_size, axis=1)[:, : s.window_size] * window
    total = pad_left + out_len + pad_right
    signal = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * s.hop
        signal[start : start + s.window_size] += frames[t]
        norm[start : start + s.window_size] += window**2
    body = slice(pad_left, pad_left + out_len)
    return Waveform(signal[body] / norm[body], s.sample_rate)


def apply_mask(s: Spectrogram, m: Mask) -> Spectrogram:
    """Scale every complex bin by the mask, keeping the mixture phase."""
    if m.values.shape != s.shape:
        raise ValueError(f"mask shape {m.values.shape} does not match spectrogram {s.shape}")
    return Spectrogram(s.complex_bins * m.values, s.fft_size, s.hop, s.window_size, s.sample_rate)


def ideal_binary_masks(sources: Sequence[Spectrogram]) -> list[Mask]:
    """All n ideal binary masks at once; ties go to the lowest source index."""
    if len(sources) == 0:
        raise ValueError("need at least one source spectrogram")
    first = sources[0]
    for other in sources[1:]:
        if not first.same_geometry(other):
            raise ValueError("source spectrograms do not share geometry")
    mags = np.stack([src.magnitude for src in sources])
    # np.argmax returns the first maximum, which is the lowest index on ties
    winner = np.argmax(mags, axis=0)
    return [Mask((winner == i).astype(np.float64), "binary") for i in range(len(sources))]


def ideal_binary_mask(sources: Sequence[Spectrogram], i: int) -> Mask:
    if len(sources) == 0:
        raise ValueError("need at least one source spectrogram")
    if not 0 <= i < len(sources):
        raise IndexError(f"source index {i} out of range for {len(sources)} sources")
    return ideal_binary_masks(sources)[i]
