"""Audio front end: resampling, framing, and the 64-band log-mel transform.

All models consume the same representation: 16 kHz mono audio framed with a
25 ms window and a 10 ms hop, mapped onto 64 triangular mel filters and
log-compressed. No frame centering or padding is applied, so a 30 s clip
yields exactly 2998 frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 16_000
WINDOW_SAMPLES = 400  # 25 ms at 16 kHz
HOP_SAMPLES = 160  # 10 ms at 16 kHz
N_MELS = 64
N_FFT = 512
LOG_FLOOR = 1e-10
FRAME_OFFSET_S = 0.010
WINDOW_LENGTH_S = 0.025

MEL_FMIN = 0.0
MEL_FMAX = 8000.0


class AudioError(ValueError):
    """Raised on malformed or out-of-contract audio input."""


@dataclass(frozen=True)
class AudioClip:
    """Mono audio with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise AudioError("empty audio")
        if not np.all(np.isfinite(samples)):
            raise AudioError("non-finite samples")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def slice_samples(self, start: int, stop: int) -> "AudioClip":
        return AudioClip(self.samples[start:stop], self.sample_rate)


@dataclass(frozen=True)
class LogMelSpectrogram:
    """(num_frames, 64) natural-log mel energies."""

    values: np.ndarray
    frame_offset_s: float = FRAME_OFFSET_S
    window_length_s: float = WINDOW_LENGTH_S

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != N_MELS:
            raise AudioError(f"expected (frames, {N_MELS}) matrix")
        if not np.all(np.isfinite(values)):
            raise AudioError("non-finite spectrogram entries")
        object.__setattr__(self, "values", values)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited polyphase resampling; identity when rates match."""
    if target_rate <= 0:
        raise AudioError("target_rate must be positive")
    if clip.sample_rate == target_rate:
        return clip
    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    out = resample_poly(clip.samples, up, down)
    return AudioClip(out, target_rate)


def frame_count(num_samples: int, window: int = WINDOW_SAMPLES, hop: int = HOP_SAMPLES) -> int:
    """Number of analysis frames without padding or centering."""
    if num_samples < window:
        raise AudioError("clip shorter than one analysis window")
    return (num_samples - window) // hop + 1


def mel_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """n_mels + 2 edge frequencies equally spaced on the HTK mel scale."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = MEL_FMIN,
    fmax: float = MEL_FMAX,
) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters with area normalization."""
    edges = mel_frequencies(n_mels, fmin, fmax)
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        tri = np.maximum(0.0, np.minimum(up, down))
        fb[m] = tri * (2.0 / (hi - lo))  # area normalization
    return fb


_MEL_FB: np.ndarray | None = None
_HANN: np.ndarray | None = None


def _filterbank_and_window() -> tuple[np.ndarray, np.ndarray]:
    global _MEL_FB, _HANN
    if _MEL_FB is None:
        _MEL_FB = mel_filterbank()
        _HANN = get_window("hann", WINDOW_SAMPLES, fftbins=True)
    return _MEL_FB, _HANN


def log_mel(clip: AudioClip) -> LogMelSpectrogram:
    """Log-mel spectrogram of a 16 kHz clip; shape (frame_count(len), 64)."""
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    n_frames = frame_count(len(clip.samples))
    fb, hann = _filterbank_and_window()
    idx = np.arange(WINDOW_SAMPLES)[None, :] + HOP_SAMPLES * np.arange(n_frames)[:, None]
    frames = clip.samples[idx] * hann
    spectrum = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = spectrum @ fb.T
    return LogMelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)))


def read_wav(path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a WAV file (PCM16 or float32), downmix to mono, resample."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV sample format: {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return resample(AudioClip(samples, int(rate)), target_rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write a float32 mono WAV."""
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
