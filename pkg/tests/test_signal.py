import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from binsep.signal import (
    BinauralSignal, ComplexSpectrum, SampleRateMismatch, WavFormatError, Waveform,
    convolve_full, irfft, read_wav, rfft, stft, write_wav,
)


def loop_convolve(x, h):
    """O(T*L) double loop."""
    y = np.zeros(len(x) + len(h) - 1)
    for n in range(len(y)):
        for k in range(len(x)):
            if 0 <= n - k < len(h):
                y[n] += x[k] * h[n - k]
    return y


def naive_dft(x, n):
    xp = np.zeros(n)
    xp[:len(x)] = x
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (xp[None, :] * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


finite = st.floats(-1.0, 1.0, allow_nan=False)


class TestContainers:
    def test_waveform_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(4), 0)

    def test_waveform_rejects_nan(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]))

    def test_binaural_length_mismatch(self):
        with pytest.raises(ValueError):
            BinauralSignal(np.zeros(4), np.zeros(5))

    def test_swapped(self):
        b = BinauralSignal(np.arange(3.0), -np.arange(3.0))
        s = b.swapped()
        assert np.array_equal(s.left, b.right) and np.array_equal(s.right, b.left)

    def test_spectrum_bin_count(self):
        with pytest.raises(ValueError):
            ComplexSpectrum(np.zeros(4, complex), 8)


class TestWav:
    def test_pcm16_peak(self, tmp_path):
        data = np.zeros((10, 2), np.int16)
        data[3] = 32767
        wavfile.write(tmp_path / "a.wav", 8000, data)
        sig = read_wav(tmp_path / "a.wav")
        assert isinstance(sig, BinauralSignal)
        assert sig.left.max() == 32767 / 32768 and sig.right.max() == 32767 / 32768

    def test_mono_duration(self, tmp_path):
        wavfile.write(tmp_path / "m.wav", 8000, np.zeros(8000, np.int16))
        w = read_wav(tmp_path / "m.wav")
        assert isinstance(w, Waveform) and len(w.samples) == 8000
        assert w.duration == 1.0

    def test_float32_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, 500).astype(np.float32).astype(np.float64)
        write_wav(tmp_path / "f.wav", Waveform(x))
        y = read_wav(tmp_path / "f.wav").samples
        assert np.array_equal(x, y)

    def test_stereo_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        b = BinauralSignal(*rng.uniform(-1, 1, (2, 100)).astype(np.float32).astype(np.float64))
        write_wav(tmp_path / "s.wav", b)
        rate, raw = wavfile.read(tmp_path / "s.wav")
        assert raw.shape == (100, 2)
        back = read_wav(tmp_path / "s.wav")
        assert np.array_equal(back.left, b.left) and np.array_equal(back.right, b.right)

    def test_pcm16_clipping(self, tmp_path):
        meta = write_wav(tmp_path / "c.wav", Waveform(np.array([0.0, 1.5, 0.25])), encoding="pcm16")
        assert meta["clipped"] == 1
        rate, raw = wavfile.read(tmp_path / "c.wav")
        assert raw[1] == 32767

    def test_rate_mismatch(self, tmp_path):
        wavfile.write(tmp_path / "r.wav", 16000, np.zeros(10, np.int16))
        with pytest.raises(SampleRateMismatch):
            read_wav(tmp_path / "r.wav", expected_rate=8000)

    def test_unsupported_encoding(self, tmp_path):
        wavfile.write(tmp_path / "u.wav", 8000, np.zeros(10, np.int32))
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "u.wav")

    def test_three_channels_rejected(self, tmp_path):
        wavfile.write(tmp_path / "t.wav", 8000, np.zeros((10, 3), np.int16))
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "t.wav")


class TestConvolution:
    def test_impulse_identity(self):
        x = np.random.default_rng(0).standard_normal(20)
        assert np.array_equal(convolve_full(x, [1.0]), x)

    def test_delay(self):
        x = np.random.default_rng(0).standard_normal(20)
        h = np.zeros(4)
        h[3] = 1.0
        y = convolve_full(x, h)
        assert np.array_equal(y[:3], np.zeros(3)) and np.array_equal(y[3:], x)

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        x, h = rng.standard_normal(13), rng.standard_normal(5)
        expected = loop_convolve(x, h)
        assert np.max(np.abs(convolve_full(x, h) - expected)) <= 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            convolve_full([], [1.0])
        with pytest.raises(ValueError):
            convolve_full([1.0], [])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=30), st.lists(finite, min_size=1, max_size=30),
           st.lists(finite, min_size=1, max_size=10), finite, finite)
    def test_linearity(self, x, y, h, a, b):
        n = min(len(x), len(y))
        x, y = np.array(x[:n]), np.array(y[:n])
        lhs = convolve_full(a * x + b * y, h)
        rhs = a * convolve_full(x, h) + b * convolve_full(y, h)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=30), st.lists(finite, min_size=1, max_size=10),
           st.integers(0, 6))
    def test_commutes_with_delay(self, x, h, d):
        x = np.array(x)
        delayed_first = convolve_full(np.concatenate([np.zeros(d), x]), h)
        delayed_after = np.concatenate([np.zeros(d), convolve_full(x, h)])
        assert np.max(np.abs(delayed_first - delayed_after)) <= 1e-12


class TestFFT:
    def test_constant(self):
        X = rfft(np.full(16, 0.5), 16)
        assert X.bins[0] == pytest.approx(8.0)
        assert np.max(np.abs(X.bins[1:])) < 1e-12

    def test_impulse(self):
        x = np.zeros(16)
        x[0] = 1.0
        assert np.allclose(rfft(x, 16).bins, 1.0, atol=1e-15)

    def test_naive_dft_oracle(self):
        x = np.random.default_rng(3).standard_normal(32)
        expected = naive_dft(x, 32)
        assert np.max(np.abs(rfft(x, 32).bins - expected)) <= 1e-10

    def test_non_power_of_two(self):
        with pytest.raises(ValueError):
            rfft(np.zeros(10), 12)
        with pytest.raises(ValueError):
            rfft(np.zeros(10), 8)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=64), st.integers(0, 2))
    def test_round_trip_and_parseval(self, x, extra):
        x = np.array(x)
        n = 1
        while n < len(x):
            n *= 2
        n <<= extra
        X = rfft(x, n)
        back = irfft(X)
        assert np.max(np.abs(back[:len(x)] - x)) <= 1e-10
        w = np.full(X.bins.shape, 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        assert np.sum(x ** 2) == pytest.approx(np.sum(w * np.abs(X.bins) ** 2) / n, rel=1e-10, abs=1e-12)


class TestSTFT:
    def test_zero_signal(self):
        S = stft(np.zeros(400), 256, 8)
        assert not np.any(S)

    def test_frame_count(self):
        assert stft(np.zeros(8000), 256, 8).shape == (1000, 129)
        assert stft(np.zeros(8001), 256, 8).shape[0] == 1001

    def test_bin_centred_sinusoid(self):
        k = 12
        t = np.arange(2048)
        x = np.cos(2 * np.pi * k * t / 256)
        S = stft(x, 256, 64, window="rect")
        energy = np.abs(S) ** 2
        inner = energy[4:-4]  # frames clear of edge padding
        assert np.all(inner[:, k] / inner.sum(axis=1) >= 0.99)

    def test_window_smaller_than_hop(self):
        with pytest.raises(ValueError):
            stft(np.zeros(100), 4, 8)
