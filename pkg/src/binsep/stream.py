"""Causal frame-by-frame inference.

A stream consumes one hop (``encoder_stride`` samples per channel) at a
time and, once the first encoder window is full, returns one hop of every
separated binaural source per call.  All state is fixed-size: the current
encoder window, running sums for each cumulative layer norm, the dilated
convolution histories and the decoder overlap-add tail.  The arithmetic
mirrors the offline path so streamed output matches
``SeparationModel.forward_binaural`` to rounding error.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.special import expit

from .model import SeparationModel


class StreamError(ValueError):
    pass


class _RunningNorm:
    """Cumulative layer norm over (passes, channels) frames."""

    def __init__(self, passes: int, gain: np.ndarray, bias: np.ndarray, eps: float):
        self.gain, self.bias, self.eps = gain, bias, eps
        self.s1 = np.zeros(passes)
        self.s2 = np.zeros(passes)
        self.frames = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        C = x.shape[1]
        self.s1 = self.s1 + x[:, :, None].sum(axis=1)[:, 0]
        self.s2 = self.s2 + (x * x)[:, :, None].sum(axis=1)[:, 0]
        self.frames += 1
        count = float(C * self.frames)
        mu = self.s1 / count
        var = np.maximum(self.s2 / count - mu * mu, 0.0)
        rstd = 1.0 / np.sqrt(var + self.eps)
        return self.gain * ((x - mu[:, None]) * rstd[:, None]) + self.bias

    def nbytes(self) -> int:
        return self.s1.nbytes + self.s2.nbytes


def _prelu(x, slope):
    return x * np.where(x <= 0, slope, 1.0)


class StreamState:
    """Streaming state for one binaural input stream."""

    def __init__(self, model: SeparationModel):
        cfg = model.config
        if not cfg.causal:
            raise StreamError("streaming needs a causal model")
        if cfg.variant == "feat_concat":
            raise StreamError(
                f"feat_concat uses centred {cfg.stft_window}-sample STFT frames and needs "
                f"{cfg.stft_window // 2} samples of lookahead; it cannot stream causally")
        self.model = model
        self.config = cfg
        p = {k: v.data for k, v in model.params.items()}
        self._p = p
        eps = cfg.norm_eps
        self.passes = 2
        self.hop = cfg.encoder_stride
        self.window = cfg.filter_length
        self.input_buffer = np.zeros((2, self.window))
        self.buffered = 0
        self.input_norm = _RunningNorm(2, p["separator.input_norm.gain"], p["separator.input_norm.bias"], eps)
        self.blocks = []
        for i, d in enumerate(model.dilations()):
            pre = f"separator.block{i}."
            H = cfg.hidden_channels
            self.blocks.append({
                "pre": pre,
                "dilation": d,
                "norm1": _RunningNorm(2, p[pre + "norm1.gain"], p[pre + "norm1.bias"], eps),
                "norm2": _RunningNorm(2, p[pre + "norm2.gain"], p[pre + "norm2.bias"], eps),
                "history": np.zeros((2, H, (cfg.kernel_size - 1) * d)),
            })
        C = cfg.num_speakers
        self.ola = np.zeros((2, C, self.window))
        self.frames_in = 0
        self.frames_out = 0
        self.samples_in = 0
        self.samples_out = 0
        self.encoder_frames = 0
        self.flushed = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def latency_samples(self) -> int:
        return self.config.latency_samples

    @property
    def latency_ms(self) -> float:
        return self.config.latency_ms

    def nbytes(self) -> int:
        n = self.input_buffer.nbytes + self.ola.nbytes + self.input_norm.nbytes()
        for b in self.blocks:
            n += b["history"].nbytes + b["norm1"].nbytes() + b["norm2"].nbytes()
        return n

    def capacities(self) -> dict:
        return {"input_buffer": self.input_buffer.shape[-1], "ola": self.ola.shape[-1],
                "histories": [b["history"].shape[-1] for b in self.blocks]}

    # -- one encoder frame ---------------------------------------------------

    def _process_window(self, window: np.ndarray) -> None:
        """Run one encoder window (2, L) through the network; updates the OLA tail."""
        cfg, p = self.config, self._p
        prim = window  # pass 0: primary=left, pass 1: primary=right
        sec = window[::-1]
        w = p["encoder.primary.weight"][:, 0, :]
        rep_p = prim @ w.T + p["encoder.primary.bias"]
        rep_s = None
        if cfg.has_secondary_encoder:
            w2 = p["encoder.secondary.weight"][:, 0, :]
            rep_s = sec @ w2.T + p["encoder.secondary.bias"]
        x = rep_p if cfg.variant == "single" else np.concatenate([rep_p, rep_s], axis=1)
        h = self.input_norm(x)
        h = h @ p["separator.bottleneck.weight"][:, :, 0].T + p["separator.bottleneck.bias"]
        skip_sum = None
        for blk in self.blocks:
            pre, d = blk["pre"], blk["dilation"]
            g = h @ p[pre + "conv_in.weight"][:, :, 0].T + p[pre + "conv_in.bias"]
            g = _prelu(g, p[pre + "prelu1"])
            g = blk["norm1"](g)
            hist = blk["history"]
            kw = p[pre + "depthwise.weight"]
            K = kw.shape[1]
            out = np.zeros_like(g)
            for k in range(K - 1):
                out += kw[:, k] * hist[:, :, k * d]
            out += kw[:, K - 1] * g
            out += p[pre + "depthwise.bias"]
            if hist.shape[-1]:
                hist[:, :, :-1] = hist[:, :, 1:]
                hist[:, :, -1] = g
            g = _prelu(out, p[pre + "prelu2"])
            g = blk["norm2"](g)
            res = g @ p[pre + "residual.weight"][:, :, 0].T + p[pre + "residual.bias"]
            skip = g @ p[pre + "skip.weight"][:, :, 0].T + p[pre + "skip.bias"]
            h = h + res
            skip_sum = skip if skip_sum is None else skip_sum + skip
        o = _prelu(skip_sum, p["separator.output_prelu"])
        o = o @ p["separator.head.weight"][:, :, 0].T + p["separator.head.bias"]
        masks = expit(o)
        C, N = cfg.num_speakers, cfg.encoder_filters
        if cfg.variant == "mask_and_sum":
            m = masks.reshape(2, 2, C, N)
            reps = m[:, 0] * rep_p[:, None, :] + m[:, 1] * rep_s[:, None, :]
        else:
            base = rep_p if cfg.variant == "single" else rep_p + rep_s
            reps = masks.reshape(2, C, N) * base[:, None, :]
        frames = reps @ p["decoder.weight"][:, 0, :]  # (2, C, L)
        self.ola += frames
        self.encoder_frames += 1

    def _emit(self, n: int) -> np.ndarray:
        out = self.ola[:, :, :n] + self._p["decoder.bias"][0]
        self.ola = np.concatenate([self.ola[:, :, n:], np.zeros(self.ola.shape[:2] + (n,))], axis=2)
        self.frames_out += 1
        self.samples_out += n
        return out.transpose(1, 0, 2)  # (C, 2, n)


def open_stream(model: SeparationModel) -> StreamState:
    """New, empty stream over ``model``; latency is in ``state.latency_ms``."""
    return StreamState(model)


def push_frame(state: StreamState, left, right) -> np.ndarray | None:
    """Feed one hop per channel; returns (C, 2, hop) output or None while warming up."""
    if state.flushed:
        raise StreamError("stream already flushed")
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    hop = state.hop
    if left.shape != (hop,) or right.shape != (hop,):
        raise StreamError(f"frames must have exactly {hop} samples per channel")
    buf = state.input_buffer
    buf[:, :-hop] = buf[:, hop:]
    buf[0, -hop:] = left
    buf[1, -hop:] = right
    state.frames_in += 1
    state.samples_in += hop
    state.buffered = min(state.window, state.buffered + hop)
    if state.buffered < state.window:
        return None
    state._process_window(buf.copy())
    return state._emit(hop)


def flush(state: StreamState) -> np.ndarray:
    """Emit the remaining overlap-add tail; total output then equals total input."""
    C = state.config.num_speakers
    if state.flushed:
        return np.zeros((C, 2, 0))
    state.flushed = True
    if state.samples_in == 0:
        return np.zeros((C, 2, 0))
    if state.encoder_frames == 0:
        # input shorter than one window: the offline path zero-pads to one window
        window = np.zeros((2, state.window))
        window[:, :state.buffered] = state.input_buffer[:, -state.buffered:]
        state._process_window(window)
        return state._emit(state.samples_in)
    tail = state.samples_in - state.samples_out
    return state._emit(tail)


def stream_separate(model: SeparationModel, x_l, x_r) -> np.ndarray:
    """Run a whole binaural signal through a stream; returns (C, 2, T)."""
    x_l = np.asarray(x_l, dtype=np.float64)
    x_r = np.asarray(x_r, dtype=np.float64)
    T = x_l.shape[0]
    state = open_stream(model)
    hop = state.hop
    pad = (-T) % hop
    xl = np.pad(x_l, (0, pad))
    xr = np.pad(x_r, (0, pad))
    chunks = []
    for start in range(0, T + pad, hop):
        out = push_frame(state, xl[start:start + hop], xr[start:start + hop])
        if out is not None:
            chunks.append(out)
    chunks.append(flush(state))
    return np.concatenate(chunks, axis=2)[:, :, :T]


def benchmark_stream(model: SeparationModel, duration_s: float = 2.0, seed: int = 0) -> dict:
    """Wall-clock cost of streaming ``duration_s`` of random audio."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    hop = cfg.encoder_stride
    n_frames = max(1, int(round(duration_s * cfg.sample_rate / hop)))
    audio = 0.1 * rng.standard_normal((2, n_frames * hop))
    state = open_stream(model)
    times = np.empty(n_frames)
    t_start = time.perf_counter()
    for f in range(n_frames):
        t0 = time.perf_counter()
        push_frame(state, audio[0, f * hop:(f + 1) * hop], audio[1, f * hop:(f + 1) * hop])
        times[f] = time.perf_counter() - t0
    flush(state)
    total = time.perf_counter() - t_start
    budget_ms = 1000.0 * hop / cfg.sample_rate
    audio_s = n_frames * hop / cfg.sample_rate
    return {
        "frames": n_frames,
        "audio_seconds": audio_s,
        "total_wall_s": total,
        "real_time_factor": total / audio_s,
        "per_frame_p50_ms": float(np.percentile(times, 50) * 1000.0),
        "per_frame_p99_ms": float(np.percentile(times, 99) * 1000.0),
        "frame_budget_ms": budget_ms,
        "algorithmic_latency_samples": cfg.latency_samples,
        "algorithmic_latency_ms": cfg.latency_ms,
    }
