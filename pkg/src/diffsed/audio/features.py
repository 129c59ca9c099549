from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LOG_FLOOR = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if np.any(np.abs(self.samples) > 1.0):
            raise ValueError("waveform samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T, F]
    hop_seconds: float
    sample_rate: int

    def frame_time(self, i):
        return np.asarray(i) * self.hop_seconds

    def time_to_frame(self, seconds):
        return np.rint(np.asarray(seconds) / self.hop_seconds).astype(int)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters with unit peak, shape [n_mels, n_fft // 2 + 1]."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    fb.setflags(write=False)
    return fb


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_logmel(
    w: Waveform,
    win: int = 1024,
    hop: int = 512,
    n_fft: int = 1024,
    n_mels: int = 64,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> MelSpectrogram:
    """Log-mel power spectrogram, ``log(mel @ |STFT|^2 + 1e-6)``.

    Frames are not centered: frame i covers samples [i*hop, i*hop + win).
    """
    fmax = w.sample_rate / 2 if fmax is None else fmax
    if win > n_fft:
        raise ValueError("win must not exceed n_fft")
    if hop > win:
        raise ValueError("hop must not exceed win")
    if fmax > w.sample_rate / 2:
        raise ValueError("fmax above Nyquist")
    x = w.samples
    if len(x) < win:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one window ({win})")
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * hann(win), n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(w.sample_rate, n_fft, n_mels, float(fmin), float(fmax)).T
    return MelSpectrogram(np.log(mel + LOG_FLOOR), hop / w.sample_rate, w.sample_rate)
