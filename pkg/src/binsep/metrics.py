"""Separation objectives, interaural-cue errors and trimmed aggregation."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .signal import BinauralSignal, next_pow2

EPS_REL = 1e-12
SNR_CAP_DB = 10.0 * math.log10(1.0 / EPS_REL)  # 120 dB
GCC_MAX_LAG_S = 1e-3
GCC_UPSAMPLE = 16
PHAT_FLOOR = 1e-12


class UndefinedMetric(ValueError):
    """A metric that cannot be computed for this input (e.g. silent channel)."""


def _pair(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != 2:
        raise ValueError(f"expected a binaural signal of shape (2, T), got {arr.shape}")
    return arr


def _vec(x) -> np.ndarray:
    if hasattr(x, "samples"):
        x = x.samples
    return np.asarray(x, dtype=np.float64)


def snr(reference, estimate) -> float:
    """Plain SNR in dB; a perfect estimate is capped at 120 dB."""
    x, xh = _vec(reference), _vec(estimate)
    if x.shape != xh.shape:
        raise ValueError("reference and estimate lengths differ")
    power = float(np.dot(x, x))
    if power <= 0.0:
        raise UndefinedMetric("SNR undefined for a zero reference")
    err = xh - x
    return 10.0 * math.log10(power / (float(np.dot(err, err)) + EPS_REL * power))


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at 120 dB like ``snr``."""
    x, xh = _vec(reference), _vec(estimate)
    if x.shape != xh.shape:
        raise ValueError("reference and estimate lengths differ")
    power = float(np.dot(x, x))
    if power <= 0.0:
        raise UndefinedMetric("SI-SDR undefined for a zero reference")
    alpha = float(np.dot(xh, x)) / power
    target = alpha * x
    tp = float(np.dot(target, target))
    if tp == 0.0:
        return float("-inf")
    err = xh - target
    return 10.0 * math.log10(tp / (float(np.dot(err, err)) + EPS_REL * tp))


_OBJECTIVES = {"snr": snr, "si_sdr": si_sdr}


def objective_matrix(targets, estimates, objective: str = "snr") -> np.ndarray:
    """M[i, j] = mean over both channels of objective(target_i, estimate_j)."""
    fn = _OBJECTIVES[objective]
    t = [_pair(x) for x in targets]
    e = [_pair(x) for x in estimates]
    if len(t) != len(e):
        raise ValueError(f"{len(t)} targets but {len(e)} estimates")
    M = np.empty((len(t), len(e)))
    for i, ti in enumerate(t):
        for j, ej in enumerate(e):
            M[i, j] = 0.5 * (fn(ti[0], ej[0]) + fn(ti[1], ej[1]))
    return M


def best_permutation(M: np.ndarray) -> tuple[tuple[int, ...], float]:
    C = M.shape[0]
    best, best_val = None, -np.inf
    for perm in itertools.permutations(range(C)):
        val = float(np.mean(M[np.arange(C), perm]))
        if val > best_val:
            best, best_val = perm, val
    return best, best_val


def pit_assign(targets, estimates, objective: str = "snr") -> tuple[tuple[int, ...], float]:
    """Utterance-level permutation search with speaker-tied binaural pairs.

    Returns (perm, loss) where ``perm[i]`` is the estimate index assigned to
    target ``i`` and loss is the negative mean objective (dB) over all 2C
    channel signals.  Exhaustive, so C is limited to 4.
    """
    if len(targets) != len(estimates):
        raise ValueError(f"{len(targets)} targets but {len(estimates)} estimates")
    if len(targets) > 4:
        raise ValueError("pit_assign enumerates permutations; C must be <= 4")
    perm, val = best_permutation(objective_matrix(targets, estimates, objective))
    return perm, -val


def gcc_phat_tdoa(x_l, x_r, sample_rate: int = 8000, max_lag_s: float = GCC_MAX_LAG_S,
                  upsample: int = GCC_UPSAMPLE) -> float:
    """Delay of the right channel relative to the left, in seconds.

    Positive means the right channel lags.  PHAT-weighted cross-power
    spectrum on an FFT of the next power of two >= 2T, inverse-transformed
    on an ``upsample``-times denser lag grid; the peak inside +/-max_lag is
    refined by a parabola through its neighbours.
    """
    l, r = _vec(x_l), _vec(x_r)
    if l.shape != r.shape:
        raise ValueError("channels must have equal length")
    if l.shape[0] < 256:
        raise ValueError("GCC-PHAT needs at least 256 samples")
    if upsample < 1:
        raise ValueError("upsample must be >= 1")
    if not np.any(l) or not np.any(r):
        raise UndefinedMetric("ITD undefined for a silent channel")
    n = next_pow2(2 * l.shape[0])
    cross = np.conj(np.fft.rfft(l, n)) * np.fft.rfft(r, n)
    cross /= np.maximum(np.abs(cross), PHAT_FLOOR)
    m = n * upsample
    cc = np.fft.irfft(cross, m)
    max_shift = min(int(round(max_lag_s * sample_rate * upsample)), m // 2 - 1)
    lags = np.arange(-max_shift, max_shift + 1)
    vals = cc[lags % m]
    k = int(np.argmax(vals))
    peak = lags[k]
    y0, ym, yp = cc[peak % m], cc[(peak - 1) % m], cc[(peak + 1) % m]
    denom = ym - 2.0 * y0 + yp
    delta = 0.5 * (ym - yp) / denom if denom < 0 else 0.0
    return float((peak + delta) / (sample_rate * upsample))


def itd_error(target, estimate, sample_rate: int = 8000, **gcc_kwargs) -> float:
    """|ITD(target) - ITD(estimate)| in microseconds."""
    t, e = _pair(target), _pair(estimate)
    itd_t = gcc_phat_tdoa(t[0], t[1], sample_rate, **gcc_kwargs)
    itd_e = gcc_phat_tdoa(e[0], e[1], sample_rate, **gcc_kwargs)
    return float(abs(itd_t - itd_e) * 1e6)


def ild_db(signal) -> float:
    s = _pair(signal)
    pl, pr = float(np.dot(s[0], s[0])), float(np.dot(s[1], s[1]))
    if pl <= 0.0 or pr <= 0.0:
        raise UndefinedMetric("ILD undefined for a zero-power channel")
    return 10.0 * math.log10(pl / pr)


def ild_error(target, estimate) -> float:
    """|ILD(target) - ILD(estimate)| in dB, ILD from whole-signal powers."""
    return abs(ild_db(target) - ild_db(estimate))


def snr_improvement(mixture, target, estimate) -> float:
    """Mean over channels of SNR(target, estimate) - SNR(target, mixture)."""
    m, t, e = _pair(mixture), _pair(target), _pair(estimate)
    return 0.5 * sum(snr(t[c], e[c]) - snr(t[c], m[c]) for c in range(2))


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = ("scene_id", "speaker_id", "estimate_index", "angle_deg", "snri_db", "si_sdr_db",
               "itd_error_us", "ild_error_db", "capped")


@dataclass
class UtteranceMetrics:
    scene_id: str
    speaker_id: int
    snri_db: float
    si_sdr_db: float
    itd_error_us: float | None
    ild_error_db: float | None
    permutation: list[int]
    angle_deg: float | None = None
    capped: bool = False

    @property
    def estimate_index(self) -> int:
        return self.permutation[self.speaker_id]


@dataclass
class MetricsReport:
    per_utterance: list[UtteranceMetrics]
    aggregates: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"aggregates": self.aggregates, "settings": self.settings,
                "per_utterance": [asdict(u) for u in self.per_utterance]}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for u in self.per_utterance:
                w.writerow([u.scene_id, u.speaker_id, u.estimate_index,
                            "" if u.angle_deg is None else repr(float(u.angle_deg)),
                            repr(float(u.snri_db)), repr(float(u.si_sdr_db)),
                            "" if u.itd_error_us is None else repr(float(u.itd_error_us)),
                            "" if u.ild_error_db is None else repr(float(u.ild_error_db)),
                            int(u.capped)])


def trimmed_mean(values, trim_fraction: float) -> tuple[float, int]:
    """Mean after dropping the floor(n*trim) largest values; returns (mean, dropped)."""
    if not 0.0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")
    vals = sorted((float(v) for v in values), reverse=True)
    if not vals:
        return float("nan"), 0
    drop = int(math.floor(len(vals) * trim_fraction))
    kept = vals[drop:]
    return math.fsum(kept) / len(kept), drop


def aggregate(reports, trim_fraction: float = 0.05) -> dict:
    """Aggregate per-utterance metrics.

    Means use exactly rounded summation, so they do not depend on row order.
    SNRi and SI-SDR are plain means.  ITD and ILD errors drop the top
    ``trim_fraction`` (floor of count * fraction) before averaging; undefined
    entries (None/NaN) are excluded and counted.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate needs at least one utterance")
    if not 0.0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")

    def defined(vals):
        return [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]

    itd = defined([r.itd_error_us for r in reports])
    ild = defined([r.ild_error_db for r in reports])
    mean_itd, drop_itd = trimmed_mean(itd, trim_fraction)
    mean_ild, drop_ild = trimmed_mean(ild, trim_fraction)
    return {
        "count": len(reports),
        "mean_snri": math.fsum(r.snri_db for r in reports) / len(reports),
        "mean_si_sdr": math.fsum(r.si_sdr_db for r in reports) / len(reports),
        "mean_itd_error": mean_itd,
        "mean_ild_error": mean_ild,
        "trim_fraction": trim_fraction,
        "itd_dropped": drop_itd,
        "ild_dropped": drop_ild,
        "itd_undefined": len(reports) - len(itd),
        "ild_undefined": len(reports) - len(ild),
        "capped": sum(1 for r in reports if r.capped),
    }


# ---------------------------------------------------------------------------
# angle buckets

BUCKET_COLUMNS = ("bucket", "lo_deg", "hi_deg", "count", "mean_snri", "mean_si_sdr",
                  "mean_itd_error", "mean_ild_error")


def parse_angle_buckets(text: str) -> list[tuple[str, float, float]]:
    """Parse "<15,15-45,45-90,>90" into half-open [lo, hi) intervals in degrees."""
    buckets = []
    for raw in text.split(","):
        label = raw.strip()
        if not label:
            raise ValueError(f"empty bucket in {text!r}")
        try:
            if label.startswith("<"):
                lo, hi = 0.0, float(label[1:])
            elif label.startswith(">"):
                lo, hi = float(label[1:]), math.inf
            else:
                a, b = label.split("-")
                lo, hi = float(a), float(b)
        except ValueError:
            raise ValueError(f"cannot parse angle bucket {label!r}") from None
        if not lo < hi:
            raise ValueError(f"angle bucket {label!r} is empty")
        buckets.append((label, lo, hi))
    ordered = sorted(buckets, key=lambda b: b[1])
    for (la, _, ha), (lb, lo_b, _) in zip(ordered, ordered[1:]):
        if lo_b < ha:
            raise ValueError(f"angle buckets {la!r} and {lb!r} overlap")
    return buckets


def bucket_of(angle: float | None, buckets) -> str | None:
    if angle is None:
        return None
    for label, lo, hi in buckets:
        if lo <= angle < hi:
            return label
    return None


def aggregate_by_angle(reports, buckets, trim_fraction: float = 0.05) -> list[dict]:
    """One aggregate row per bucket; empty buckets report a count of 0."""
    rows = []
    for label, lo, hi in buckets:
        members = [r for r in reports if bucket_of(r.angle_deg, [(label, lo, hi)]) == label]
        row = {"bucket": label, "lo_deg": lo, "hi_deg": hi, "count": len(members)}
        if members:
            agg = aggregate(members, trim_fraction)
            row.update({k: agg[k] for k in BUCKET_COLUMNS[4:]})
        else:
            row.update({k: float("nan") for k in BUCKET_COLUMNS[4:]})
        rows.append(row)
    return rows


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if den == 0.0:
        raise UndefinedMetric("correlation undefined for constant input")
    return float(np.dot(xc, yc)) / den
