"""
Log-Mel frontend matching the pretrained speech encoder's input convention.

400-sample periodic Hann window, 160-sample hop, reflect padding, power
spectrum, 80 Slaney-scale area-normalized triangular filters, log10 with a
1e-10 floor, dynamic range clamp of 8 decades and (x + 4) / 4 scaling.
"""

from functools import lru_cache

import numpy as np

from src.guard.domain import (
    AudioBuffer,
    HOP_LENGTH,
    LogMelSpectrogram,
    MelFilterbank,
    N_FFT,
    N_FRAMES,
    N_MELS,
    N_SAMPLES,
    SAMPLE_RATE,
)
from src.guard.errors import WrongLength, WrongRate

LOG_FLOOR = 1e-10
DYNAMIC_RANGE = 8.0

# Slaney mel scale: linear below 1 kHz, logarithmic above
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOG_STEP = np.log(6.4) / 27.0


def hz_to_mel(hz):
    hz = np.asarray(hz, dtype=np.float64)
    linear = hz / _F_SP
    log_part = _MIN_LOG_MEL + np.log(np.maximum(hz, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOG_STEP
    return np.where(hz >= _MIN_LOG_HZ, log_part, linear)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    linear = _F_SP * mel
    log_part = _MIN_LOG_HZ * np.exp(_LOG_STEP * (mel - _MIN_LOG_MEL))
    return np.where(mel >= _MIN_LOG_MEL, log_part, linear)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, w[k] = 0.5 * (1 - cos(2 pi k / n))"""
    if n < 2:
        raise ValueError(f"window length must be at least 2, got {n}")
    k = np.arange(n, dtype=np.float64)
    return (0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))).astype(np.float32)


def _band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """n_mels + 2 band edges in Hz, equally spaced in mel from 0 to Nyquist"""
    mels = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(mels)


def mel_frequencies(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Center frequency in Hz of each filter"""
    return _band_edges(n_mels, sample_rate)[1:-1]


@lru_cache(maxsize=4)
def build_mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                         sample_rate: int = SAMPLE_RATE) -> MelFilterbank:
    """Triangular filters with area normalization (2 / bandwidth)"""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = _band_edges(n_mels, sample_rate)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]

    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]

    weights = weights.astype(np.float32)
    weights.setflags(write=False)
    return MelFilterbank(weights=weights, sample_rate=sample_rate, n_fft=n_fft)


def stft_power(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """Power spectrum, frames x (n_fft // 2 + 1); the final boundary frame is dropped"""
    padded = np.pad(samples.astype(np.float64), n_fft // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:-1]
    spectrum = np.fft.rfft(frames * hann_window(n_fft).astype(np.float64), axis=1)
    return spectrum.real ** 2 + spectrum.imag ** 2


def log_mel_spectrogram(buffer: AudioBuffer,
                        filterbank: MelFilterbank = None) -> LogMelSpectrogram:
    """80 x 3000 normalized log-Mel features of a 30 s, 16 kHz buffer

    Raises:
        WrongRate: Buffer is not 16 kHz
        WrongLength: Buffer is not exactly 480,000 samples
    """
    if buffer.sample_rate != SAMPLE_RATE:
        raise WrongRate(f"expected {SAMPLE_RATE} Hz, got {buffer.sample_rate} Hz")
    if len(buffer) != N_SAMPLES:
        raise WrongLength(f"expected {N_SAMPLES} samples, got {len(buffer)}")
    filterbank = filterbank or build_mel_filterbank()

    power = stft_power(buffer.samples)
    mel = filterbank.weights.astype(np.float64) @ power.T
    log_spec = np.log10(np.maximum(mel, LOG_FLOOR))
    log_spec = np.maximum(log_spec, log_spec.max() - DYNAMIC_RANGE)
    values = ((log_spec + 4.0) / 4.0).astype(np.float32)

    assert values.shape == (N_MELS, N_FRAMES)
    return LogMelSpectrogram(values)
