"""Signal-processing primitives: STFT magnitudes, log-mel embeddings, SDR.

Everything here is a pure function of its inputs. Arrays are float64 unless
noted; waveforms are 1-D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 8000
WINDOW = 256
HOP = 128
N_MELS = 32

MEL_EPS = 1e-8
SDR_EPS = 1e-12


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise SignalError("waveform must be 1-D with at least one sample")
        if not np.all(np.isfinite(x)):
            raise SignalError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise SignalError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray  # (T, F) magnitudes
    hop: int
    window: int
    sample_rate: int = SAMPLE_RATE

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


def hann(window: int) -> np.ndarray:
    """Periodic Hann window (COLA at 50% overlap)."""
    n = np.arange(window)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window)


def _as_samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def frame_signal(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Strided (T, window) view of ``x``; T = floor((len - window) / hop) + 1."""
    if x.size < window:
        raise SignalError("signal too short")
    n_frames = (x.size - window) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n_frames]


def stft(x: np.ndarray, window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    """Complex one-sided STFT, shape (T, window // 2 + 1)."""
    frames = frame_signal(np.asarray(x, dtype=np.float64), window, hop)
    return np.fft.rfft(frames * hann(window), axis=1)


def stft_magnitude(w, window: int = WINDOW, hop: int = HOP) -> Spectrogram:
    """Hann-windowed magnitude spectrogram (no padding)."""
    if hop < 1:
        raise SignalError("hop must be >= 1")
    if window < 2 or window & (window - 1):
        raise SignalError("window must be a power of two")
    sr = w.sample_rate if isinstance(w, Waveform) else SAMPLE_RATE
    x = _as_samples(w)
    return Spectrogram(np.abs(stft(x, window, hop)), hop=hop, window=window, sample_rate=sr)


def istft(spec: np.ndarray, length: int, window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Samples not covered by any window (zero window-power) come out as 0.
    """
    w = hann(window)
    frames = np.fft.irfft(spec, n=window, axis=1) * w
    n_frames = frames.shape[0]
    total = max(length, (n_frames - 1) * hop + window)
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for i in range(n_frames):
        s = i * hop
        out[s:s + window] += frames[i]
        norm[s:s + window] += w2
    covered = norm > 1e-10
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return out[:length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (n_mels, n_fft // 2 + 1).

    A filter narrower than the bin spacing would come out empty; such rows get
    unit weight on the bin nearest their centre so every row sums to > 0.
    """
    nyquist = sample_rate / 2.0
    if f_max is None:
        f_max = nyquist
    if n_mels < 2:
        raise SignalError("n_mels must be >= 2")
    if not (0.0 <= f_min < f_max <= nyquist):
        raise SignalError("need 0 <= f_min < f_max <= nyquist")
    freqs = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    for k in np.flatnonzero(fb.sum(axis=1) <= 0.0):
        fb[k, np.argmin(np.abs(freqs - mid[k, 0]))] = 1.0
    return fb


def log_mel_embed(s: Spectrogram, n_mels: int = N_MELS, f_min: float = 0.0,
                  f_max: float | None = None) -> np.ndarray:
    """Per-frame log-mel embedding, shape (T, n_mels)."""
    fb = mel_filterbank(n_mels, s.window, s.sample_rate, f_min, f_max)
    return np.log(s.frames @ fb.T + MEL_EPS)


def sdr(target, estimate) -> float:
    """Energy-ratio signal-to-distortion ratio in dB."""
    t = _as_samples(target)
    e = _as_samples(estimate)
    if t.shape != e.shape:
        raise SignalError("target and estimate must have equal length")
    num = float(np.sum(t * t))
    if num == 0.0:
        raise SignalError("undefined SDR")
    den = float(np.sum((t - e) ** 2)) + SDR_EPS
    return 10.0 * np.log10(num / den)
