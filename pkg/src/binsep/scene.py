"""Binaural scene rendering and dataset synthesis.

Azimuths are in degrees, 0 straight ahead, positive toward the listener's
left ear.  With that convention a positive azimuth yields a positive ITD
(right channel lags) and a positive ILD (left channel louder), matching the
sign conventions of :mod:`binsep.metrics`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .signal import (DEFAULT_SAMPLE_RATE, BinauralSignal, Waveform, convolve_full, read_wav,
                     write_wav)

HEAD_RADIUS_M = 0.0875
SPEED_OF_SOUND_MPS = 343.0
ILD_SCALE_DB = 10.0
# Peak deviation of the realised interaural delay from the Woodworth value,
# as measured by GCC-PHAT on broadband signals (see tests/test_scene.py).
DELAY_DESIGN_TOL_US = 10.0


class DegenerateSource(ValueError):
    pass


@dataclass(frozen=True)
class HrirPair:
    left: np.ndarray
    right: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    azimuth_deg: float | None = None
    source_id: str = ""

    def __post_init__(self):
        left = np.asarray(self.left, dtype=np.float64)
        right = np.asarray(self.right, dtype=np.float64)
        if left.ndim != 1 or left.shape != right.shape:
            raise ValueError("HRIR channels must be 1-D and of equal length")
        if left.shape[0] < 1:
            raise ValueError("HRIR must have at least one tap")
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise ValueError("HRIR contains NaN or Inf")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __len__(self) -> int:
        return self.left.shape[0]

    @classmethod
    def identity(cls, sample_rate: int = DEFAULT_SAMPLE_RATE, delay_right: int = 0) -> "HrirPair":
        """Unit impulses, optionally with the right channel delayed."""
        n = delay_right + 1
        left = np.zeros(n)
        right = np.zeros(n)
        left[0] = 1.0
        right[delay_right] = 1.0
        return cls(left, right, sample_rate, 0.0, f"identity_d{delay_right}")


def woodworth_itd(azimuth_deg: float, head_radius_m: float = HEAD_RADIUS_M,
                  speed_of_sound_mps: float = SPEED_OF_SOUND_MPS) -> float:
    """Spherical-head ITD in seconds: (a/c)(theta + sin theta)."""
    theta = math.radians(azimuth_deg)
    return head_radius_m / speed_of_sound_mps * (theta + math.sin(theta))


def nominal_ild_db(azimuth_deg: float, ild_scale_db: float = ILD_SCALE_DB) -> float:
    return ild_scale_db * math.sin(math.radians(azimuth_deg))


def _fractional_delay(delay: float, length: int, half_width: float) -> np.ndarray:
    """Hann-windowed sinc centred on ``delay`` with unit DC gain."""
    u = np.arange(length) - delay
    w = np.where(np.abs(u) < half_width, 0.5 * (1.0 + np.cos(np.pi * u / half_width)), 0.0)
    h = np.sinc(u) * w
    return h / h.sum()


def synth_hrir(azimuth_deg: float, head_radius_m: float = HEAD_RADIUS_M,
               speed_of_sound_mps: float = SPEED_OF_SOUND_MPS, fir_length: int = 64,
               ild_scale_db: float = ILD_SCALE_DB, sample_rate: int = DEFAULT_SAMPLE_RATE) -> HrirPair:
    """Synthetic HRIR pair from the Woodworth ITD and a sinusoidal ILD.

    The ITD is split symmetrically: the near ear is advanced and the far ear
    delayed by ITD/2 around the filter centre.  The ILD is applied as
    +/-ILD/2 dB broadband gains.
    """
    if not -90.0 <= azimuth_deg <= 90.0:
        raise ValueError(f"azimuth {azimuth_deg} outside the frontal range [-90, 90]")
    if fir_length < 32:
        raise ValueError("fir_length must be >= 32")
    itd = woodworth_itd(azimuth_deg, head_radius_m, speed_of_sound_mps) * sample_rate
    max_half = woodworth_itd(90.0, head_radius_m, speed_of_sound_mps) * sample_rate / 2
    centre = (fir_length - 1) / 2.0
    half_width = centre - math.ceil(max_half)
    if half_width < 4:
        raise ValueError("fir_length too short for this head radius")
    left = _fractional_delay(centre - itd / 2, fir_length, half_width)
    right = _fractional_delay(centre + itd / 2, fir_length, half_width)
    ild = nominal_ild_db(azimuth_deg, ild_scale_db)
    left *= 10.0 ** (ild / 40.0)
    right *= 10.0 ** (-ild / 40.0)
    return HrirPair(left, right, sample_rate, float(azimuth_deg), f"synth_az{azimuth_deg:+.2f}")


def spatialize(source, hrir: HrirPair) -> BinauralSignal:
    """Convolve a mono source with both HRIR channels (full length)."""
    if isinstance(source, Waveform):
        if source.sample_rate != hrir.sample_rate:
            raise ValueError(f"source rate {source.sample_rate} != HRIR rate {hrir.sample_rate}")
        x = source.samples
    else:
        x = np.asarray(source, dtype=np.float64)
    if x.size < 1:
        raise ValueError("source must have at least one sample")
    return BinauralSignal(convolve_full(x, hrir.left), convolve_full(x, hrir.right), hrir.sample_rate)


# ---------------------------------------------------------------------------
# synthetic material


def speech_like_source(rng: np.random.Generator, duration_s: float = 2.0,
                       sample_rate: int = DEFAULT_SAMPLE_RATE, f0_range=(100.0, 300.0),
                       rms: float = 0.05) -> np.ndarray:
    """Amplitude-modulated harmonic bursts imitating voiced speech.

    A base f0 is drawn from ``f0_range``; each burst varies it by up to
    +/-10% with a linear glide.  Bursts last 0.2-0.6 s separated by
    0.02-0.15 s pauses, carry a 3-6 Hz amplitude modulation and a random
    two-peak spectral envelope, and the result is scaled to ``rms``.
    """
    n = int(round(duration_s * sample_rate))
    out = np.zeros(n)
    t_all = np.arange(n) / sample_rate
    base_f0 = rng.uniform(*f0_range)
    pos = int(rng.uniform(0.0, 0.05) * sample_rate)
    nyq_limit = 0.45 * sample_rate
    while pos < n:
        length = int(rng.uniform(0.2, 0.6) * sample_rate)
        seg = slice(pos, min(n, pos + length))
        m = seg.stop - seg.start
        t = t_all[:m]
        f_start = base_f0 * rng.uniform(0.9, 1.1)
        f_end = base_f0 * rng.uniform(0.9, 1.1)
        f_inst = f_start + (f_end - f_start) * t / max(t[-1], 1e-9)
        phase = 2.0 * np.pi * np.cumsum(f_inst) / sample_rate
        formants = rng.uniform([300.0, 1000.0], [900.0, 2500.0])
        burst = np.zeros(m)
        for k in range(1, int(nyq_limit / max(f_start, f_end)) + 1):
            fk = k * base_f0
            env = 1.0 / k + sum(np.exp(-0.5 * ((fk - f) / 200.0) ** 2) for f in formants)
            burst += env * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        am_rate = rng.uniform(3.0, 6.0)
        burst *= 1.0 - 0.5 * (0.5 + 0.5 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
        ramp = min(int(0.02 * sample_rate), m // 2)
        if ramp > 0:
            r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            burst[:ramp] *= r
            burst[m - ramp:] *= r[::-1]
        out[seg] += burst
        pos = seg.stop + int(rng.uniform(0.02, 0.15) * sample_rate)
    power = np.sqrt(np.mean(out ** 2))
    return out * (rms / power) if power > 0 else out


def colored_noise(rng: np.random.Generator, n: int, exponent: float = 1.0) -> np.ndarray:
    """Noise with a 1/f**exponent power spectrum, unit RMS."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / f ** (exponent / 2.0), n)
    return x / np.sqrt(np.mean(x ** 2))


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SourceSlot:
    hrir: HrirPair
    level_offset_db: float = 0.0
    source_ref: str = ""


@dataclass
class NoiseSpec:
    target_snr_db: float
    mode: str = "decorrelated-diotic"
    noise_ref: str = ""
    hrir: HrirPair | None = None


@dataclass
class SceneSpec:
    sources: list[SourceSlot]
    noise: NoiseSpec | None = None
    seed: int = 0
    target_length: str = "min"

    def __post_init__(self):
        ids = [id(s.hrir) for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ValueError("two sources share the same HrirPair")


@dataclass
class SceneInstance:
    mixture: BinauralSignal
    targets: list[BinauralSignal]
    spec: SceneSpec
    true_itd_us: list[float | None]
    true_ild_db: list[float | None]
    noise: BinauralSignal | None = None


def _fit_length(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop to n samples, looping first if x is shorter."""
    if x.shape[-1] < n:
        reps = -(-n // x.shape[-1])
        x = np.concatenate([x] * reps, axis=-1)
    start = int(rng.integers(0, x.shape[-1] - n + 1))
    return x[..., start:start + n]


def render_noise(noise, length: int, rng: np.random.Generator, mode: str = "decorrelated-diotic",
                 hrir: HrirPair | None = None, sample_rate: int = DEFAULT_SAMPLE_RATE) -> BinauralSignal:
    """Bring a mono or binaural noise to a binaural signal of ``length`` samples."""
    if isinstance(noise, BinauralSignal):
        pair = _fit_length(noise.data, length, rng)
        return BinauralSignal(pair[0], pair[1], noise.sample_rate)
    x = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, dtype=np.float64)
    if mode == "decorrelated-diotic":
        return BinauralSignal(_fit_length(x, length, rng), _fit_length(x, length, rng), sample_rate)
    if mode == "spatialized":
        if hrir is None:
            raise ValueError("spatialized noise needs an HRIR")
        b = spatialize(_fit_length(x, max(1, length - len(hrir) + 1), rng), hrir)
        return BinauralSignal(b.left[:length], b.right[:length], b.sample_rate)
    raise ValueError(f"unknown noise mode {mode!r}")


def add_noise_at_snr(mixture: BinauralSignal, noise, target_snr_db: float,
                     rng: np.random.Generator | None = None, mode: str = "decorrelated-diotic",
                     hrir: HrirPair | None = None) -> tuple[BinauralSignal, BinauralSignal]:
    """Scale ``noise`` so 10*log10(P_speech / P_noise) equals the target.

    Powers are summed over both channels.  ``target_snr_db=inf`` disables the
    noise path.  Returns (noisy mixture, scaled noise).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(mixture)
    if math.isinf(target_snr_db) and target_snr_db > 0:
        zero = np.zeros(n)
        return mixture, BinauralSignal(zero, zero.copy(), mixture.sample_rate)
    rendered = render_noise(noise, n, rng, mode, hrir, mixture.sample_rate)
    p_speech = float(np.sum(mixture.data ** 2))
    p_noise = float(np.sum(rendered.data ** 2))
    if p_noise <= 0.0:
        raise ValueError("noise has zero power")
    gain = math.sqrt(p_speech / (p_noise * 10.0 ** (target_snr_db / 10.0)))
    scaled = BinauralSignal(rendered.left * gain, rendered.right * gain, mixture.sample_rate)
    noisy = BinauralSignal(mixture.left + scaled.left, mixture.right + scaled.right, mixture.sample_rate)
    return noisy, scaled


def _cue_or_none(fn, *args):
    # undefined cues (silent channel, render too short for GCC-PHAT) are stored as None
    try:
        return fn(*args)
    except ValueError:
        return None


def mix_scene(spec: SceneSpec, sources, rng: np.random.Generator | None = None,
              noise=None) -> SceneInstance:
    """Render every source through its HRIR and sum into a binaural mixture.

    ``sources`` are mono Waveforms or arrays aligned with ``spec.sources``.
    Rendered targets are truncated to the shortest one.  If ``spec.noise`` is
    set, ``noise`` supplies the noise material.
    """
    if not spec.sources:
        raise ValueError("scene has no sources")
    if len(sources) != len(spec.sources):
        raise ValueError("number of source signals does not match the scene spec")
    if spec.target_length != "min":
        raise ValueError("only the 'min' truncation policy is supported")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    rendered = []
    for slot, src in zip(spec.sources, sources):
        wave = src if isinstance(src, Waveform) else Waveform(np.asarray(src, dtype=np.float64),
                                                               slot.hrir.sample_rate)
        scaled = wave.samples * 10.0 ** (slot.level_offset_db / 20.0)
        if not np.any(scaled):
            raise DegenerateSource(f"source {slot.source_ref or len(rendered)} has zero power")
        rendered.append(spatialize(Waveform(scaled, wave.sample_rate), slot.hrir))
    n = min(len(r) for r in rendered)
    fs = rendered[0].sample_rate
    targets = [BinauralSignal(r.left[:n], r.right[:n], fs) for r in rendered]
    left = np.sum([t.left for t in targets], axis=0)
    right = np.sum([t.right for t in targets], axis=0)
    mixture = BinauralSignal(left, right, fs)
    noise_out = None
    if spec.noise is not None:
        if noise is None:
            raise ValueError("scene spec requests noise but no noise signal was given")
        mixture, noise_out = add_noise_at_snr(mixture, noise, spec.noise.target_snr_db, rng,
                                              spec.noise.mode, spec.noise.hrir)
    itd = [_cue_or_none(lambda t: metrics.gcc_phat_tdoa(t.left, t.right, fs) * 1e6, t) for t in targets]
    ild = [_cue_or_none(metrics.ild_db, t) for t in targets]
    return SceneInstance(mixture, targets, spec, itd, ild, noise_out)


# ---------------------------------------------------------------------------
# HRIR library on disk


def save_hrir_library(directory, hrirs: list[HrirPair]) -> Path:
    """Write one stereo float32 WAV per HRIR plus ``index.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for h in hrirs:
        if h.azimuth_deg is None:
            raise ValueError("library HRIRs need an azimuth")
        name = f"az_{h.azimuth_deg:+07.2f}.wav"
        write_wav(d / name, BinauralSignal(h.left, h.right, h.sample_rate), "float32")
        entries.append({"azimuth_deg": float(h.azimuth_deg), "file": name, "source_id": h.source_id})
    index = d / "index.json"
    index.write_text(json.dumps({"sample_rate": hrirs[0].sample_rate if hrirs else DEFAULT_SAMPLE_RATE,
                                 "hrirs": entries}, indent=2))
    return index


def load_hrir_library(directory, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[HrirPair]:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    out = []
    for e in index["hrirs"]:
        sig = read_wav(d / e["file"], sample_rate)
        if not isinstance(sig, BinauralSignal):
            raise ValueError(f"{e['file']}: HRIR files must be stereo")
        out.append(HrirPair(sig.left, sig.right, sample_rate, float(e["azimuth_deg"]),
                            e.get("source_id", e["file"])))
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    duration_s: float = 2.0
    num_speakers: int = 2
    azimuth_range: tuple[float, float] = (-80.0, 80.0)
    min_separation_deg: float = 0.0
    level_offset_range_db: tuple[float, float] = (-2.5, 2.5)
    noise_snr_range_db: tuple[float, float] | None = None
    noise_mode: str = "decorrelated-diotic"
    hrir_dir: str | None = None
    source_dir: str | None = None
    fir_length: int = 64
    head_radius_m: float = HEAD_RADIUS_M
    speed_of_sound_mps: float = SPEED_OF_SOUND_MPS
    ild_scale_db: float = ILD_SCALE_DB
    source_rms: float = 0.05
    encoding: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.azimuth_range = tuple(float(a) for a in self.azimuth_range)
        self.level_offset_range_db = tuple(float(a) for a in self.level_offset_range_db)
        if self.noise_snr_range_db is not None:
            self.noise_snr_range_db = tuple(float(a) for a in self.noise_snr_range_db)
        self.validate()

    def validate(self):
        lo, hi = self.azimuth_range
        if not (-90.0 <= lo <= hi <= 90.0):
            raise ValueError(f"azimuth_range {self.azimuth_range} must satisfy -90 <= lo <= hi <= 90")
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.min_separation_deg < 0:
            raise ValueError("min_separation_deg must be >= 0")
        if self.hrir_dir is None and self.num_speakers > 1 and \
                (hi - lo) < self.min_separation_deg * (self.num_speakers - 1):
            raise ValueError("azimuth_range too narrow for min_separation_deg")
        if self.encoding not in ("float32", "pcm16"):
            raise ValueError("encoding must be float32 or pcm16")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("azimuth_range", "level_offset_range_db", "noise_snr_range_db"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)


def scene_seed(master_seed: int, index: int) -> int:
    """Child seed for scene ``index``; independent of generation order."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _sample_azimuths(rng, cfg: DatasetConfig) -> list[float]:
    lo, hi = cfg.azimuth_range
    for _ in range(10_000):
        az = sorted(float(a) for a in rng.uniform(lo, hi, cfg.num_speakers))
        gaps = np.diff(az)
        if np.all(gaps >= max(cfg.min_separation_deg, 1e-6)):
            order = rng.permutation(cfg.num_speakers)
            return [round(az[i], 3) for i in order]
    raise ValueError("could not sample azimuths with the requested separation")


def _load_pool(directory, sample_rate) -> list[np.ndarray]:
    files = sorted(Path(directory).glob("*.wav"))
    if not files:
        raise ValueError(f"no WAV files in {directory}")
    pool = []
    for f in files:
        w = read_wav(f, sample_rate)
        pool.append(w.samples if isinstance(w, Waveform) else 0.5 * (w.left + w.right))
    return pool


def render_dataset_scene(cfg: DatasetConfig, index: int, library: list[HrirPair] | None = None,
                         pool: list[np.ndarray] | None = None) -> tuple[SceneInstance, dict]:
    """Render scene ``index`` of a dataset deterministically."""
    seed = scene_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    n = int(round(cfg.duration_s * cfg.sample_rate))
    if library:
        choice = rng.choice(len(library), cfg.num_speakers, replace=False)
        hrirs = [library[i] for i in choice]
        azimuths = [h.azimuth_deg for h in hrirs]
    else:
        azimuths = _sample_azimuths(rng, cfg)
        hrirs = [synth_hrir(a, cfg.head_radius_m, cfg.speed_of_sound_mps, cfg.fir_length,
                            cfg.ild_scale_db, cfg.sample_rate) for a in azimuths]
    offsets = [round(float(v), 4) for v in rng.uniform(*cfg.level_offset_range_db, cfg.num_speakers)]
    sources = []
    for _ in range(cfg.num_speakers):
        if pool:
            src = _fit_length(pool[int(rng.integers(len(pool)))], n, rng)
            p = np.sqrt(np.mean(src ** 2))
            src = src * (cfg.source_rms / p) if p > 0 else src
        else:
            src = speech_like_source(rng, cfg.duration_s, cfg.sample_rate, rms=cfg.source_rms)
        sources.append(src)
    noise_spec, noise = None, None
    snr_db = None
    if cfg.noise_snr_range_db is not None:
        snr_db = round(float(rng.uniform(*cfg.noise_snr_range_db)), 4)
        noise_hrir = None
        if cfg.noise_mode == "spatialized":
            noise_hrir = synth_hrir(float(rng.uniform(-90, 90)), cfg.head_radius_m, cfg.speed_of_sound_mps,
                                    cfg.fir_length, cfg.ild_scale_db, cfg.sample_rate)
        noise_spec = NoiseSpec(snr_db, cfg.noise_mode, "colored_noise", noise_hrir)
        noise = colored_noise(rng, 2 * n)
    spec = SceneSpec([SourceSlot(h, o, f"synthetic_{index}_{i}") for i, (h, o) in enumerate(zip(hrirs, offsets))],
                     noise_spec, seed)
    scene = mix_scene(spec, sources, rng, noise)
    meta = {"azimuths_deg": [float(a) for a in azimuths], "level_offsets_db": offsets,
            "noise_snr_db": snr_db, "seed": seed}
    return scene, meta


def synth_dataset(config: DatasetConfig | dict, count: int, out_dir) -> list[dict]:
    """Render ``count`` scenes to WAV files and write ``manifest.json``.

    Manifest paths are relative to ``out_dir``.  Each scene's content depends
    only on (config.seed, scene index), so reruns are byte-identical.
    """
    cfg = config if isinstance(config, DatasetConfig) else DatasetConfig.from_dict(config)
    if count < 0:
        raise ValueError("count must be >= 0")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    library = load_hrir_library(cfg.hrir_dir, cfg.sample_rate) if cfg.hrir_dir else None
    if library is not None and len(library) < cfg.num_speakers:
        raise ValueError("HRIR library has fewer positions than speakers")
    pool = _load_pool(cfg.source_dir, cfg.sample_rate) if cfg.source_dir else None
    records = []
    for i in range(count):
        scene, meta = render_dataset_scene(cfg, i, library, pool)
        sid = f"scene_{i:05d}"
        (out / sid).mkdir(exist_ok=True)
        mix_rel = f"{sid}/mixture.wav"
        write_wav(out / mix_rel, scene.mixture, cfg.encoding)
        target_rel = []
        for k, t in enumerate(scene.targets):
            rel = f"{sid}/target_{k}.wav"
            write_wav(out / rel, t, cfg.encoding)
            target_rel.append(rel)
        records.append({
            "scene_id": sid,
            "mixture_path": mix_rel,
            "target_paths": target_rel,
            "azimuths_deg": meta["azimuths_deg"],
            "true_itd_us": scene.true_itd_us,
            "true_ild_db": scene.true_ild_db,
            "noise_snr_db": meta["noise_snr_db"],
            "level_offsets_db": meta["level_offsets_db"],
            "seed": meta["seed"],
        })
    (out / "manifest.json").write_text(json.dumps(records, indent=2, sort_keys=True))
    (out / "dataset_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return records


def load_manifest(path) -> tuple[list[dict], Path]:
    """Manifest records plus the directory their paths are relative to."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    records = json.loads(p.read_text())
    if not isinstance(records, list):
        raise ValueError(f"{p}: manifest must be a JSON array")
    return records, p.parent


def load_scene(record: dict, base_dir, sample_rate: int = DEFAULT_SAMPLE_RATE) -> tuple[BinauralSignal, list[BinauralSignal]]:
    base = Path(base_dir)
    mix = read_wav(base / record["mixture_path"], sample_rate)
    targets = [read_wav(base / t, sample_rate) for t in record["target_paths"]]
    for s in [mix] + targets:
        if not isinstance(s, BinauralSignal):
            raise ValueError(f"scene {record['scene_id']}: audio must be stereo")
    return mix, targets


def split_manifest(path, fractions=(0.8, 0.1, 0.1)) -> list[list[dict]]:
    """Deterministic contiguous split of a manifest's records."""
    records, _ = load_manifest(path)
    n = len(records)
    cuts = np.round(np.cumsum(fractions) / np.sum(fractions) * n).astype(int)
    parts, start = [], 0
    for c in cuts:
        parts.append(records[start:c])
        start = c
    return parts


def write_manifest(records: list[dict], path) -> Path:
    p = Path(path)
    p.write_text(json.dumps(records, indent=2, sort_keys=True))
    return p
