import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binsep.model import ModelConfig, SeparationModel, micro_config
from binsep.stream import StreamError, benchmark_stream, flush, open_stream, push_frame, stream_separate


def micro(variant="mask_and_sum", seed=0):
    m = SeparationModel(micro_config(variant), seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in m.params.items():
        if name.endswith("bias"):
            p.data = rng.normal(0.0, 0.1, p.data.shape)
    return m


def small_default(variant="mask_and_sum"):
    """Default framing (L=16, hop 8) with a narrow separator."""
    return SeparationModel(ModelConfig(variant=variant, hidden_channels=16, bottleneck_channels=16,
                                       tcn_repeats=1, blocks_per_repeat=3), seed=0)


def offline(model, xl, xr):
    return model.forward_binaural_tensor(xl, xr).data[0].transpose(1, 0, 2)  # (C, 2, T)


class TestOpen:
    def test_default_latency(self):
        s = open_stream(SeparationModel(ModelConfig(hidden_channels=8, tcn_repeats=1, blocks_per_repeat=1)))
        assert s.latency_samples == 16 and s.latency_ms == 2.0

    def test_micro_latency(self):
        assert open_stream(micro()).latency_ms == 0.5

    def test_feat_concat_rejected(self):
        with pytest.raises(StreamError, match="lookahead"):
            open_stream(micro("feat_concat"))

    def test_independent_streams(self):
        m = micro()
        a, b = open_stream(m), open_stream(m)
        rng = np.random.default_rng(0)
        for _ in range(5):
            push_frame(a, rng.standard_normal(2), rng.standard_normal(2))
        assert b.frames_in == 0 and not np.any(b.input_buffer)
        xl, xr = rng.standard_normal((2, 20))
        assert np.max(np.abs(stream_separate(m, xl, xr) - offline(m, xl, xr))) <= 1e-12


class TestPush:
    def test_first_output_on_second_frame(self):
        s = open_stream(small_default())
        rng = np.random.default_rng(1)
        assert push_frame(s, rng.standard_normal(8), rng.standard_normal(8)) is None
        out = push_frame(s, rng.standard_normal(8), rng.standard_normal(8))
        assert out.shape == (2, 2, 8)
        assert push_frame(s, rng.standard_normal(8), rng.standard_normal(8)).shape == (2, 2, 8)

    def test_wrong_frame_size(self):
        s = open_stream(small_default())
        with pytest.raises(StreamError):
            push_frame(s, np.zeros(7), np.zeros(7))
        with pytest.raises(StreamError):
            push_frame(s, np.zeros(8), np.zeros(9))

    def test_silence(self):
        m = small_default()
        for name, p in m.params.items():
            if name.endswith("bias"):
                p.data[:] = 0.0
        out = stream_separate(m, np.zeros(400), np.zeros(400))
        assert out.shape == (2, 2, 400) and not np.any(out)

    @pytest.mark.parametrize("variant", ["single", "parallel_sum", "mask_and_sum"])
    def test_equivalence_default_framing(self, variant):
        m = small_default(variant)
        rng = np.random.default_rng(2)
        xl, xr = rng.standard_normal((2, 2003))
        assert np.max(np.abs(stream_separate(m, xl, xr) - offline(m, xl, xr))) <= 1e-5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 90), st.integers(0, 1000))
    def test_equivalence_any_length(self, T, seed):
        m = micro()
        rng = np.random.default_rng(seed)
        xl, xr = rng.standard_normal((2, T))
        assert np.max(np.abs(stream_separate(m, xl, xr) - offline(m, xl, xr))) <= 1e-5


class TestFlush:
    def test_exact_hops(self):
        m = small_default()
        s = open_stream(m)
        rng = np.random.default_rng(3)
        total = 0
        for _ in range(10):
            out = push_frame(s, rng.standard_normal(8), rng.standard_normal(8))
            total += 0 if out is None else out.shape[-1]
        total += flush(s).shape[-1]
        assert total == 80

    def test_second_flush_empty(self):
        s = open_stream(micro())
        push_frame(s, np.ones(2), np.ones(2))
        assert flush(s).shape[-1] == 2
        assert flush(s).shape == (2, 2, 0)
        with pytest.raises(StreamError):
            push_frame(s, np.ones(2), np.ones(2))

    def test_empty_stream(self):
        assert flush(open_stream(micro())).shape == (2, 2, 0)


class TestMemory:
    def test_constant_state(self):
        m = small_default()
        s = open_stream(m)
        before, caps = s.nbytes(), s.capacities()
        rng = np.random.default_rng(4)
        for _ in range(500):
            push_frame(s, rng.standard_normal(8), rng.standard_normal(8))
        assert s.nbytes() == before and s.capacities() == caps
        assert caps["input_buffer"] == 16 and caps["histories"] == [2, 4, 8]


class TestBenchmark:
    def test_schema(self):
        r = benchmark_stream(micro(), duration_s=0.1)
        assert r["real_time_factor"] > 0 and r["frame_budget_ms"] == 0.25
        assert r["frames"] == 400 and r["algorithmic_latency_ms"] == 0.5
        assert r["per_frame_p99_ms"] >= r["per_frame_p50_ms"] > 0

    def test_duration_scaling(self):
        m = micro()
        short = min(benchmark_stream(m, 0.25)["total_wall_s"] for _ in range(3))
        long = min(benchmark_stream(m, 0.5)["total_wall_s"] for _ in range(3))
        assert 2.0 * 0.7 <= long / short <= 2.0 * 1.3
