"""Audio primitives: waveform containers, WAV I/O, convolution, FFT and STFT.

Everything here works in float64.  File I/O supports 16-bit PCM and 32-bit
IEEE float, mono or stereo.  No resampling is ever performed; a file whose
rate differs from the working rate is rejected.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 8000


class WavFormatError(ValueError):
    """Unsupported or malformed WAV content."""


class SampleRateMismatch(ValueError):
    """File sample rate differs from the expected working rate."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"Waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        _check_finite(samples, "Waveform")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class BinauralSignal:
    """Left/right pair sharing one length and sample rate."""

    left: np.ndarray
    right: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        left = np.asarray(self.left, dtype=np.float64)
        right = np.asarray(self.right, dtype=np.float64)
        if left.ndim != 1 or right.ndim != 1:
            raise ValueError("BinauralSignal channels must be 1-D")
        if left.shape != right.shape:
            raise ValueError(f"channel lengths differ: {left.shape[0]} vs {right.shape[0]}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        _check_finite(left, "left channel")
        _check_finite(right, "right channel")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @classmethod
    def from_array(cls, data: np.ndarray, sample_rate: int = DEFAULT_SAMPLE_RATE) -> "BinauralSignal":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != 2:
            raise ValueError(f"expected shape (2, T), got {data.shape}")
        return cls(data[0], data[1], sample_rate)

    def __len__(self) -> int:
        return self.left.shape[0]

    def __array__(self, dtype=None, copy=None):
        out = np.stack([self.left, self.right])
        return out if dtype is None else out.astype(dtype)

    @property
    def data(self) -> np.ndarray:
        return np.stack([self.left, self.right])

    def swapped(self) -> "BinauralSignal":
        return BinauralSignal(self.right, self.left, self.sample_rate)


@dataclass(frozen=True)
class ComplexSpectrum:
    bins: np.ndarray
    fft_size: int

    def __post_init__(self):
        if self.bins.shape[-1] != self.fft_size // 2 + 1:
            raise ValueError("bin count must equal fft_size/2 + 1")


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path, expected_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform | BinauralSignal:
    """Read a PCM16 or float32 WAV file.

    Integer samples are scaled by 1/32768.  Mono files give a Waveform,
    stereo files a BinauralSignal (channel 0 = left).
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if rate != expected_rate:
        raise SampleRateMismatch(f"{path}: file rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 1:
        return Waveform(samples, rate)
    if samples.shape[1] == 1:
        return Waveform(samples[:, 0], rate)
    if samples.shape[1] == 2:
        return BinauralSignal(samples[:, 0], samples[:, 1], rate)
    raise WavFormatError(f"{path}: {samples.shape[1]} channels not supported")


def write_wav(path, signal: Waveform | BinauralSignal, encoding: str = "float32") -> dict:
    """Write `signal` to `path`; returns metadata with the clip count.

    encoding is "float32" or "pcm16".  In pcm16 mode samples outside [-1, 1]
    saturate and are counted in ``clipped``.
    """
    if isinstance(signal, BinauralSignal):
        data = np.stack([signal.left, signal.right], axis=1)
    elif isinstance(signal, Waveform):
        data = signal.samples
    else:
        raise TypeError("signal must be a Waveform or BinauralSignal")
    clipped = 0
    if encoding == "float32":
        out = data.astype(np.float32)
    elif encoding == "pcm16":
        clipped = int(np.count_nonzero(np.abs(data) > 1.0))
        scaled = np.round(np.clip(data, -1.0, 1.0) * 32768.0)
        out = np.clip(scaled, -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    try:
        wavfile.write(str(path), signal.sample_rate, out)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return {"path": str(Path(path)), "encoding": encoding, "clipped": clipped,
            "channels": 1 if data.ndim == 1 else 2, "length": int(data.shape[0])}


# ---------------------------------------------------------------------------
# Convolution and transforms


def convolve_full(x, h) -> np.ndarray:
    """Full linear convolution, output length len(x) + len(h) - 1."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.size == 0 or h.size == 0:
        raise ValueError("convolve_full needs non-empty inputs")
    return np.convolve(x, h, mode="full")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def rfft(x, fft_size: int | None = None) -> ComplexSpectrum:
    """Real-input DFT on a power-of-two grid (zero-padding ``x``)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    fft_size = next_pow2(n) if fft_size is None else int(fft_size)
    if not _is_pow2(fft_size):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if fft_size < n:
        raise ValueError(f"fft_size {fft_size} shorter than input length {n}")
    return ComplexSpectrum(np.fft.rfft(x, n=fft_size), fft_size)


def irfft(spectrum: ComplexSpectrum, length: int | None = None) -> np.ndarray:
    out = np.fft.irfft(spectrum.bins, n=spectrum.fft_size)
    return out if length is None else out[..., :length]


def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)


def stft(x, window_size: int = 256, hop: int = 8, window: np.ndarray | str | None = "hann") -> np.ndarray:
    """Short-time Fourier transform with reflect centre padding.

    Frame ``t`` is centred on sample ``t * hop``; there are ``ceil(T / hop)``
    frames.  Returns complex bins with shape (..., frames, window_size//2 + 1).
    ``window`` is "hann", "rect"/None, or an explicit array.
    """
    x = np.asarray(x, dtype=np.float64)
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if window_size < hop:
        raise ValueError(f"window_size {window_size} smaller than hop {hop}")
    if isinstance(window, str):
        if window == "hann":
            win = hann_window(window_size)
        elif window == "rect":
            win = np.ones(window_size)
        else:
            raise ValueError(f"unknown window {window!r}")
    elif window is None:
        win = np.ones(window_size)
    else:
        win = np.asarray(window, dtype=np.float64)
        if win.shape != (window_size,):
            raise ValueError("window length must equal window_size")
    T = x.shape[-1]
    n_frames = -(-T // hop)
    half = window_size // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, window_size - half)]
    xp = np.pad(x, pad, mode="reflect") if T > 1 else np.pad(x, pad)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(window_size)[None, :]
    frames = xp[..., idx] * win
    return np.fft.rfft(frames, n=window_size, axis=-1)
