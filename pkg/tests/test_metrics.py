import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binsep import metrics
from binsep.metrics import (
    UndefinedMetric, UtteranceMetrics, aggregate, aggregate_by_angle, bucket_of, gcc_phat_tdoa,
    ild_error, itd_error, parse_angle_buckets, pearson, pit_assign, si_sdr, snr, snr_improvement,
    trimmed_mean,
)


def delayed(x, d):
    return np.concatenate([np.zeros(d), x[:x.size - d]]) if d else x.copy()


def sinc_delay(x, d, half=32):
    """Fractional delay by a long Hann-windowed sinc, written independently of the scene code."""
    taps = np.arange(-half, half + 1)
    h = np.sinc(taps - (d - math.floor(d))) * (0.5 + 0.5 * np.cos(np.pi * (taps - (d - math.floor(d))) / (half + 1)))
    y = np.convolve(x, h)[half:half + x.size]
    return delayed(y, int(math.floor(d)))


def noise(n=4000, seed=0):
    return np.random.default_rng(seed).standard_normal(n)


def si_sdr_oracle(x, xh):
    a = float(np.sum(xh * x) / np.sum(x * x))
    t = a * x
    return 10 * np.log10(np.sum(t ** 2) / (np.sum((xh - t) ** 2) + 1e-12 * np.sum(t ** 2)))


class TestSnr:
    def test_perfect_is_capped(self):
        x = noise(100)
        assert snr(x, x) == pytest.approx(120.0, abs=1e-9)

    def test_zero_estimate(self):
        assert snr(noise(100), np.zeros(100)) == pytest.approx(0.0, abs=1e-9)

    def test_analytic_20db(self):
        x = np.zeros(100)
        x[0] = 1.0
        e = np.zeros(100)
        e[1] = 0.1
        assert snr(x, x + e) == pytest.approx(20.0, abs=1e-8)

    def test_zero_reference(self):
        with pytest.raises(UndefinedMetric):
            snr(np.zeros(5), np.ones(5))

    def test_scale_sensitive(self):
        x, n = noise(200), 0.1 * noise(200, 1)
        assert abs(snr(x, 2 * (x + n)) - snr(x, x + n)) > 1.0


class TestSiSdr:
    @settings(max_examples=40, deadline=None)
    @given(st.floats(1e-3, 1e3))
    def test_scale_invariance(self, c):
        x, xh = noise(300), noise(300) * 0.3 + noise(300, 2)
        assert abs(si_sdr(x, c * xh) - si_sdr(x, xh)) <= 1e-9

    def test_orthogonal_10db(self):
        x = np.zeros(10)
        x[0] = 1.0
        e = np.zeros(10)
        e[3] = math.sqrt(0.1)
        assert si_sdr(x, x + e) == pytest.approx(10.0, abs=1e-8)

    def test_formula_oracle(self):
        x, xh = noise(500, 3), noise(500, 4)
        assert si_sdr(x, xh) == pytest.approx(si_sdr_oracle(x, xh), abs=1e-10)


class TestPit:
    def pairs(self, C, seed):
        rng = np.random.default_rng(seed)
        return list(rng.standard_normal((C, 2, 300))), list(rng.standard_normal((C, 2, 300)))

    def test_swapped_pair(self):
        t, _ = self.pairs(2, 0)
        perm, loss = pit_assign(t, [t[1], t[0]])
        assert perm == (1, 0)
        assert loss == pytest.approx(-120.0, abs=1e-9)

    def test_single_speaker(self):
        t, e = self.pairs(1, 1)
        assert pit_assign(t, e)[0] == (0,)

    @pytest.mark.parametrize("C", [2, 3])
    @pytest.mark.parametrize("objective", ["snr", "si_sdr"])
    def test_exhaustive_oracle(self, C, objective):
        t, e = self.pairs(C, 7 + C)
        e = [ei + 2.0 * t[(i + 1) % C] for i, ei in enumerate(e)]
        fn = snr if objective == "snr" else si_sdr
        best = None
        for perm in itertools.permutations(range(C)):
            val = np.mean([fn(t[i][ch], e[perm[i]][ch]) for i in range(C) for ch in range(2)])
            if best is None or val > best[1]:
                best = (perm, val)
        perm, loss = pit_assign(t, e, objective)
        assert perm == best[0]
        assert loss == pytest.approx(-best[1], abs=1e-12)

    def test_pairs_are_tied(self):
        # left channel prefers one estimate, right channel the other; a single slot must win
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((2, 2, 200))
        est0 = np.stack([a[0], b[1]])
        est1 = np.stack([b[0], a[1]])
        perm, _ = pit_assign([a, b], [est0, est1])
        assert sorted(perm) == [0, 1]

    def test_count_mismatch(self):
        t, e = self.pairs(2, 0)
        with pytest.raises(ValueError):
            pit_assign(t, e[:1])


class TestGccPhat:
    def test_identical(self):
        x = noise()
        assert abs(gcc_phat_tdoa(x, x)) <= 1e-15

    @pytest.mark.parametrize("d", range(9))
    def test_integer_delays(self, d):
        x = noise(seed=d)
        tau = gcc_phat_tdoa(x, delayed(x, d))
        assert abs(tau - d / 8000) <= 1 / (16 * 8000 * 4)

    def test_fractional_delay(self):
        x = noise(seed=11)
        tau = gcc_phat_tdoa(x, sinc_delay(x, 2.5))
        assert abs(tau * 1e6 - 312.5) <= 15.0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 16), st.floats(-6.0, 6.0))
    def test_antisymmetric(self, seed, d):
        x = noise(2000, seed)
        y = sinc_delay(x, abs(d)) if d >= 0 else x
        x2 = x if d >= 0 else sinc_delay(x, -d)
        grid = 1 / (16 * 8000)
        assert abs(gcc_phat_tdoa(x2, y) + gcc_phat_tdoa(y, x2)) <= grid

    def test_sign_right_lags_positive(self):
        x = noise()
        assert gcc_phat_tdoa(x, delayed(x, 3)) > 0 and gcc_phat_tdoa(delayed(x, 3), x) < 0

    def test_silent_channel(self):
        with pytest.raises(UndefinedMetric):
            gcc_phat_tdoa(noise(300), np.zeros(300))

    def test_too_short(self):
        with pytest.raises(ValueError):
            gcc_phat_tdoa(noise(100), noise(100))


class TestCueErrors:
    def setup_method(self):
        x = noise(4000, 21)
        self.target = np.stack([x, sinc_delay(x, 1.7) * 0.7])

    def test_itd_zero_on_equal(self):
        assert itd_error(self.target, self.target) == 0.0

    def test_itd_common_delay(self):
        est = np.pad(self.target, ((0, 0), (3, 0)))
        assert itd_error(self.target, est) <= 1e-6

    def test_itd_one_sample(self):
        est = np.stack([self.target[0], delayed(self.target[1], 1)])
        assert itd_error(self.target, est) == pytest.approx(125.0, abs=1e6 / (16 * 8000 * 4))

    def test_ild_zero_on_equal(self):
        assert ild_error(self.target, self.target) == 0.0

    def test_ild_left_times_two(self):
        est = self.target.copy()
        est[0] *= 2.0
        assert abs(ild_error(self.target, est) - 20 * math.log10(2.0)) <= 1e-6
        assert ild_error(self.target, est) == pytest.approx(6.0206, abs=1e-4)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(1e-3, 1e3))
    def test_ild_common_gain(self, g):
        assert ild_error(self.target, g * self.target) <= 1e-9

    def test_ild_zero_channel(self):
        est = self.target.copy()
        est[1] = 0.0
        with pytest.raises(UndefinedMetric):
            ild_error(self.target, est)


class TestSnri:
    def test_estimate_is_mixture(self):
        rng = np.random.default_rng(0)
        t, m = rng.standard_normal((2, 2, 100))
        assert snr_improvement(m, t, m) == 0.0

    def test_constructed_10db(self):
        n = 1000
        t = np.zeros((2, n))
        t[:, 0] = 1.0
        mix = t.copy()
        mix[:, 1] = 1.0  # error power 1 -> 0 dB
        est = t.copy()
        est[:, 2] = math.sqrt(0.1)  # error power 0.1 -> 10 dB
        assert snr_improvement(mix, t, est) == pytest.approx(10.0, abs=1e-8)


def rows(values_itd, values_ild=None, snri=None):
    values_ild = values_ild if values_ild is not None else values_itd
    snri = snri if snri is not None else [0.0] * len(values_itd)
    return [UtteranceMetrics(f"s{i}", 0, snri[i], 0.0, a, b, [0]) for i, (a, b) in enumerate(zip(values_itd, values_ild))]


class TestAggregate:
    def test_single_outlier_dropped(self):
        vals = [10.0] * 19 + [1000.0]
        agg = aggregate(rows(vals), 0.05)
        assert agg["mean_itd_error"] == 10.0 and agg["itd_dropped"] == 1

    def test_trim_zero(self):
        vals = list(np.random.default_rng(0).uniform(0, 100, 17))
        assert aggregate(rows(vals), 0.0)["mean_itd_error"] == pytest.approx(np.mean(vals), rel=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 1e3), min_size=1, max_size=60), st.floats(0.0, 0.49))
    def test_sort_and_slice_oracle(self, vals, trim):
        asc = sorted(vals)
        kept = asc[:len(asc) - int(math.floor(len(vals) * trim))]
        mean, _ = trimmed_mean(vals, trim)
        assert mean == math.fsum(kept) / len(kept)

    def test_undefined_excluded_and_counted(self):
        agg = aggregate(rows([1.0, None, 3.0], [None, 2.0, 2.0]), 0.0)
        assert agg["mean_itd_error"] == 2.0 and agg["itd_undefined"] == 1
        assert agg["ild_undefined"] == 1

    def test_snri_untrimmed(self):
        agg = aggregate(rows([1.0] * 20, snri=[0.0] * 19 + [100.0]), 0.05)
        assert agg["mean_snri"] == 5.0

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_bad_trim(self):
        with pytest.raises(ValueError):
            aggregate(rows([1.0]), 0.5)


class TestReports:
    def test_csv_columns(self, tmp_path):
        rep = metrics.MetricsReport(rows([1.0, None]), {}, {})
        rep.to_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0].split(",") == list(metrics.CSV_COLUMNS)
        assert len(lines) == 3

    def test_json(self, tmp_path):
        import json
        rep = metrics.MetricsReport(rows([1.0]), aggregate(rows([1.0])), {"trim_fraction": 0.05})
        rep.to_json(tmp_path / "m.json")
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["aggregates"]["mean_itd_error"] == 1.0


class TestAngleBuckets:
    def test_parse(self):
        b = parse_angle_buckets("<15,15-45,45-90,>90")
        assert [x[0] for x in b] == ["<15", "15-45", "45-90", ">90"]
        assert b[0][1:] == (0.0, 15.0) and b[3][2] == math.inf

    def test_half_open(self):
        b = parse_angle_buckets("<15,15-45,45-90,>90")
        assert bucket_of(44.0, b) == "15-45"
        assert bucket_of(45.0, b) == "45-90"
        assert bucket_of(15.0, b) == "15-45"
        assert bucket_of(90.0, b) == ">90"
        assert bucket_of(None, b) is None

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            parse_angle_buckets("0-50,40-90")
        with pytest.raises(ValueError):
            parse_angle_buckets("abc")

    def test_aggregate_by_angle(self):
        rs = rows([1.0, 2.0, 3.0])
        for r, a in zip(rs, (10.0, 44.0, 60.0)):
            r.angle_deg = a
        out = aggregate_by_angle(rs, parse_angle_buckets("<15,15-45,45-90,>90"), 0.0)
        assert [r["count"] for r in out] == [1, 1, 1, 0]
        assert out[1]["mean_itd_error"] == 2.0


def test_pearson():
    x = np.arange(10.0)
    assert pearson(x, -2 * x + 1) == pytest.approx(-1.0)
    with pytest.raises(UndefinedMetric):
        pearson(x, np.ones(10))
