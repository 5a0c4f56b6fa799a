"""WAV I/O, resampling and the log-mel front end."""

from __future__ import annotations

import wave
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly


class AudioError(IOError):
    pass


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono WAV as float32 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise AudioError(f"{path}: expected 16-bit PCM")
            if w.getnchannels() != 1:
                raise AudioError(f"{path}: expected mono audio")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: {exc}") from None
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32)
    return pcm / 32768.0, sr


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def resample(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return np.asarray(x, dtype=np.float32)
    g = gcd(sr_in, sr_out)
    # polyphase FIR with a Kaiser-windowed sinc
    y = resample_poly(np.asarray(x, dtype=np.float64), sr_out // g, sr_in // g, window=("kaiser", 5.0))
    return y.astype(np.float32)


def load_audio(path, sample_rate: int = 24000) -> np.ndarray:
    if not Path(path).exists():
        raise AudioError(f"{path}: no such file")
    x, sr = read_wav(path)
    return resample(x, sr, sample_rate)


def frame_signal(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Frames of ``window`` samples every ``hop``; count = floor((N - window) / hop) + 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < window:
        raise ValueError(f"signal of {x.shape[0]} samples is shorter than one window ({window})")
    n = (x.shape[0] - window) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax=None) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, freqs.shape[0]))
    for i in range(n_mels):
        lo, mid, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(x: np.ndarray, sample_rate: int, window: int, hop: int, n_mels: int = 80) -> np.ndarray:
    """Log-mel spectrogram on the same frame grid as :func:`frame_signal`."""
    frames = frame_signal(x, window, hop) * np.hanning(window)
    n_fft = 1 << (window - 1).bit_length()
    spec = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = spec @ mel_filterbank(sample_rate, n_fft, n_mels).T
    return np.log(np.maximum(mel, 1e-10)).astype(np.float32)
