"""Command-line entry point: synth, train, eval, separate and stream.

Every subcommand builds an effective configuration from, in increasing
priority: built-in defaults, presets (``--toy``), the ``--config`` JSON
file, dedicated flags and ``--set key.sub=value`` overrides.  Unknown keys
anywhere are errors.  The effective configuration is written to
``<out_dir>/effective_config.json`` and can be fed back with ``--config``
to reproduce the run.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime or data
error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics
from .autodiff import CheckpointError
from .model import VARIANTS, InfeasibleBudget, ModelConfig, align_param_budget, count_params_for, toy_config
from .scene import DatasetConfig, load_manifest, synth_dataset, write_manifest
from .signal import BinauralSignal, SampleRateMismatch, WavFormatError, read_wav, write_wav
from .train import TrainConfig, TrainingDiverged, evaluate, load_checkpoint, train

log = logging.getLogger("binsep")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# toy preset: small model, short crops, tiny self-synthesised corpus when no manifests are given
TOY_TRAIN = {"segment_seconds": 0.5, "learning_rate": 3e-3, "batch_size": 4}
TOY_CORPUS = {"count": 12, "valid_count": 4, "duration_s": 0.5, "min_separation_deg": 30.0, "seed": 0}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing


def _defaults(command: str) -> dict:
    if command == "synth":
        return {"count": 10, "out_dir": "synth_out", "dataset": DatasetConfig().to_dict()}
    if command == "train":
        return {"variant": "mask_and_sum", "toy": False, "align_params": None, "model_seed": 0,
                "train_manifest": None, "valid_manifest": None, "out_dir": "train_out",
                "model": ModelConfig().to_dict(), "train": TrainConfig().to_dict(),
                "toy_corpus": dict(TOY_CORPUS)}
    if command == "eval":
        return {"checkpoint": None, "manifest": None, "trim_fraction": 0.05, "bypass": None,
                "angle_buckets": None, "out_dir": "eval_out"}
    if command in ("separate", "stream"):
        return {"checkpoint": None, "input": None, "scene": None, "out_dir": f"{command}_out"}
    raise ConfigError(f"unknown subcommand {command!r}")


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Recursively overlay ``update``; keys missing from ``base`` are errors."""
    for key, value in update.items():
        name = prefix + key
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {name!r} must be an object")
        if isinstance(base[key], dict):
            _merge(base[key], value, name + ".")
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> dict:
    """"a.b=3" -> {"a": {"b": 3}}; values are JSON when they parse as JSON."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(raw)
    return out


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    data.pop("subcommand", None)
    return data


def build_config(command: str, file_cfg: dict, flag_cfg: dict, overrides: list[str],
                 presets: dict | None = None) -> dict:
    cfg = _defaults(command)
    if presets:
        _merge(cfg, presets)
    _merge(cfg, copy.deepcopy(file_cfg))
    _merge(cfg, flag_cfg)
    for item in overrides:
        _merge(cfg, parse_override(item))
    return cfg


def _write_effective(cfg: dict, command: str, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective_config.json"
    payload = dict(cfg, subcommand=command)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _range(text: str, key: str) -> list[float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"{key}: expected lo:hi, got {text!r}") from None
    return [lo, hi]


def _existing(path, key: str) -> Path:
    if path is None:
        raise ConfigError(f"{key} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{key}: {p} does not exist")
    return p


def _manifest_file(path, key: str) -> Path:
    p = _existing(path, key)
    return p / "manifest.json" if p.is_dir() else p


def _checkpoint(path):
    p = _existing(path, "checkpoint")
    if p.is_dir():
        p = p / "best.ckpt"
        if not p.is_file():
            raise ConfigError(f"checkpoint: no best.ckpt in {p.parent}")
    try:
        model, meta, _ = load_checkpoint(p)
    except (CheckpointError, OSError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {p}: {exc}") from None
    return model, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict) -> Path:
    try:
        ds = DatasetConfig.from_dict(cfg["dataset"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset: {exc}") from None
    count = cfg["count"]
    if not isinstance(count, int) or count < 1:
        raise ConfigError(f"count must be a positive integer, got {count!r}")
    out = Path(cfg["out_dir"])
    synth_dataset(ds, count, out)
    _write_effective(cfg, "synth", out)
    manifest = out / "manifest.json"
    print(f"wrote {count} scenes to {out}; manifest {manifest}")
    return manifest


def _resolved_model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(dict(cfg["model"], variant=cfg["variant"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def _align(cfg: dict, model_cfg: ModelConfig) -> ModelConfig:
    target = cfg["align_params"]
    if not isinstance(target, int) or target <= 0:
        raise ConfigError(f"align_params must be a positive integer, got {target!r}")
    try:
        aligned = align_param_budget([model_cfg.replace(variant=v) for v in VARIANTS], target)
    except InfeasibleBudget as exc:
        raise ConfigError(f"align_params: {exc}") from None
    print(f"{'variant':<14}{'B':>6}{'H':>6}{'params':>12}{'rel':>9}")
    for c in aligned:
        n = count_params_for(c)
        print(f"{c.variant:<14}{c.bottleneck_channels:>6}{c.hidden_channels:>6}{n:>12d}"
              f"{(n - target) / target:>+9.2%}")
    return next(c for c in aligned if c.variant == model_cfg.variant)


def _toy_corpus(cfg: dict, out: Path) -> tuple[Path, Path]:
    tc = cfg["toy_corpus"]
    ds = DatasetConfig(duration_s=tc["duration_s"], min_separation_deg=tc["min_separation_deg"],
                       seed=tc["seed"], num_speakers=cfg["model"]["num_speakers"])
    data = out / "toy_data"
    records = synth_dataset(ds, tc["count"] + tc["valid_count"], data)
    n_valid = tc["valid_count"]
    tr = write_manifest(records[:-n_valid], data / "train_manifest.json")
    va = write_manifest(records[-n_valid:], data / "valid_manifest.json")
    return tr, va


def cmd_train(cfg: dict) -> Path | None:
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg['variant']!r}")
    model_cfg = _resolved_model_config(cfg)
    if cfg["align_params"] is not None:
        model_cfg = _align(cfg, model_cfg)
        cfg["model"].update(hidden_channels=model_cfg.hidden_channels,
                            bottleneck_channels=model_cfg.bottleneck_channels)
        if cfg["train_manifest"] is None and not cfg["toy"]:
            return None
    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    out = Path(cfg["out_dir"])
    if cfg["train_manifest"] is None and cfg["toy"]:
        train_m, valid_m = _toy_corpus(cfg, out)
    else:
        train_m = _manifest_file(cfg["train_manifest"], "train_manifest")
        valid_m = _manifest_file(cfg["valid_manifest"], "valid_manifest")
    _write_effective(cfg, "train", out)
    from .model import SeparationModel
    try:
        model = SeparationModel(model_cfg, seed=cfg["model_seed"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    print(f"training {model_cfg.variant} ({model.count_params()} parameters) for {tcfg.epochs} epochs")
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    try:
        result = train(model, train_m, valid_m, tcfg, out_dir=out)
    except (WavFormatError, SampleRateMismatch, KeyError, OSError) as exc:
        raise DataError(f"cannot load training data: {exc}") from None
    except TrainingDiverged as exc:
        raise DataError(str(exc)) from None
    summary = {"best_valid_loss": result.best_valid_loss, "epochs_run": len(result.history),
               "parameters": model.count_params(), "resampled_segments": result.resampled_segments,
               "checkpoint": str(out / "best.ckpt")}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"best validation loss {result.best_valid_loss:.3f}; checkpoint {out / 'best.ckpt'}")
    return out / "best.ckpt"


def _plot(report: metrics.MetricsReport, bucket_rows, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    snri = [u.snri_db for u in report.per_utterance]
    ild = [u.ild_error_db for u in report.per_utterance]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].hist(snri, bins=20)
    axes[0].set_xlabel("SNRi (dB)")
    axes[0].set_ylabel("utterances")
    if bucket_rows:
        axes[1].bar([r["bucket"] for r in bucket_rows], [r["mean_snri"] for r in bucket_rows])
        axes[1].set_xlabel("angle separation (deg)")
        axes[1].set_ylabel("mean SNRi (dB)")
    else:
        pts = [(s, i) for s, i in zip(snri, ild) if i is not None]
        axes[1].scatter([p[0] for p in pts], [p[1] for p in pts], s=8)
        axes[1].set_xlabel("SNRi (dB)")
        axes[1].set_ylabel("ILD error (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _write_buckets(rows, path: Path) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(metrics.BUCKET_COLUMNS)
        for r in rows:
            w.writerow([r[k] for k in metrics.BUCKET_COLUMNS])


def cmd_eval(cfg: dict) -> Path:
    bypass = cfg["bypass"]
    if bypass not in (None, "oracle", "mixture"):
        raise ConfigError(f"bypass must be null, 'oracle' or 'mixture', got {bypass!r}")
    trim = cfg["trim_fraction"]
    if not isinstance(trim, (int, float)) or not 0.0 <= trim < 0.5:
        raise ConfigError(f"trim_fraction must lie in [0, 0.5), got {trim!r}")
    buckets = None
    if cfg["angle_buckets"]:
        try:
            buckets = metrics.parse_angle_buckets(cfg["angle_buckets"])
        except ValueError as exc:
            raise ConfigError(f"angle_buckets: {exc}") from None
    manifest = _manifest_file(cfg["manifest"], "manifest")
    model = None
    if bypass is None:
        model, _ = _checkpoint(cfg["checkpoint"])
    out = Path(cfg["out_dir"])
    _write_effective(cfg, "eval", out)
    try:
        report = evaluate(model, manifest, trim_fraction=trim, bypass=bypass)
    except (WavFormatError, SampleRateMismatch, KeyError, OSError) as exc:
        raise DataError(f"cannot load evaluation data: {exc}") from None
    report.to_csv(out / "metrics.csv")
    bucket_rows = None
    if buckets:
        bucket_rows = metrics.aggregate_by_angle(report.per_utterance, buckets, trim)
        report.aggregates["angle_buckets"] = bucket_rows
        _write_buckets(bucket_rows, out / "buckets.csv")
    report.to_json(out / "metrics.json")
    _plot(report, bucket_rows, out / "metrics.png")
    agg = report.aggregates
    print(f"{agg['count']} rows  SNRi {agg['mean_snri']:.2f} dB  SI-SDR {agg['mean_si_sdr']:.2f} dB  "
          f"dITD {agg['mean_itd_error']:.1f} us  dILD {agg['mean_ild_error']:.2f} dB")
    for r in bucket_rows or []:
        print(f"  {r['bucket']:>8}: n={r['count']:<4d} SNRi {r['mean_snri']:.2f} dB  "
              f"dITD {r['mean_itd_error']:.1f} us  dILD {r['mean_ild_error']:.2f} dB")
    return out / "metrics.csv"


def _read_binaural(path, sample_rate: int) -> BinauralSignal:
    p = _existing(path, "input")
    try:
        sig = read_wav(p, expected_rate=sample_rate)
    except (WavFormatError, SampleRateMismatch) as exc:
        raise DataError(f"{p}: {exc}") from None
    if not isinstance(sig, BinauralSignal):
        raise ConfigError(f"input {p} is mono; the model needs a two-channel (binaural) file")
    return sig


def _write_outputs(estimates: np.ndarray, scene: str, out: Path, sample_rate: int) -> list[Path]:
    """estimates (C, 2, T) -> <scene>_spk<i>_<l|r>.wav, one mono file per ear."""
    from .signal import Waveform
    paths = []
    for i, pair in enumerate(estimates):
        for ch, side in enumerate("lr"):
            p = out / f"{scene}_spk{i}_{side}.wav"
            write_wav(p, Waveform(pair[ch], sample_rate))
            paths.append(p)
    return paths


def cmd_separate(cfg: dict) -> list[Path]:
    model, _ = _checkpoint(cfg["checkpoint"])
    sig = _read_binaural(cfg["input"], model.config.sample_rate)
    scene = cfg["scene"] or Path(cfg["input"]).stem
    out = Path(cfg["out_dir"])
    _write_effective(cfg, "separate", out)
    est = np.stack([np.stack([e.left, e.right]) for e in model.forward_binaural(sig.left, sig.right)])
    paths = _write_outputs(est, scene, out, model.config.sample_rate)
    print(f"wrote {len(paths)} files to {out}")
    return paths


def cmd_stream(cfg: dict) -> list[Path]:
    from .stream import StreamError, flush, open_stream, push_frame
    model, _ = _checkpoint(cfg["checkpoint"])
    sig = _read_binaural(cfg["input"], model.config.sample_rate)
    scene = cfg["scene"] or Path(cfg["input"]).stem
    out = Path(cfg["out_dir"])
    try:
        state = open_stream(model)
    except StreamError as exc:
        raise ConfigError(str(exc)) from None
    _write_effective(cfg, "stream", out)
    hop = state.hop
    T = sig.left.shape[0]
    pad = (-T) % hop
    x = np.pad(np.stack([sig.left, sig.right]), ((0, 0), (0, pad)))
    chunks, times = [], []
    t_start = time.perf_counter()
    for start in range(0, T + pad, hop):
        t0 = time.perf_counter()
        frame = push_frame(state, x[0, start:start + hop], x[1, start:start + hop])
        times.append(time.perf_counter() - t0)
        if frame is not None:
            chunks.append(frame)
    chunks.append(flush(state))
    wall = time.perf_counter() - t_start
    est = np.concatenate(chunks, axis=2)[:, :, :T]
    paths = _write_outputs(est, scene, out, model.config.sample_rate)
    sr = model.config.sample_rate
    report = {
        "input": str(cfg["input"]), "samples": T, "frames_in": state.frames_in, "frames_out": state.frames_out,
        "hop_samples": hop, "algorithmic_latency_samples": state.latency_samples,
        "algorithmic_latency_ms": state.latency_ms, "frame_budget_ms": 1000.0 * hop / sr,
        "per_frame_p50_ms": float(np.percentile(times, 50) * 1000.0) if times else 0.0,
        "per_frame_p99_ms": float(np.percentile(times, 99) * 1000.0) if times else 0.0,
        "total_wall_s": wall, "real_time_factor": wall / (T / sr) if T else 0.0,
        "state_bytes": state.nbytes(), "outputs": [str(p) for p in paths],
    }
    (out / "stream_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"latency {state.latency_ms:.2f} ms; real-time factor {report['real_time_factor']:.3f}; "
          f"wrote {len(paths)} files to {out}")
    return paths


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. train.learning_rate=0.002 (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binsep", description="Binaural speech separation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesise a binaural scene corpus")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--angles", help="azimuth range lo:hi in degrees")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, help="scene length in seconds")
    p.add_argument("--min-separation", type=float, help="minimum source separation in degrees")
    p.add_argument("--speakers", type=int)
    p.add_argument("--noise-snr", help="noise SNR range lo:hi in dB")

    p = sub.add_parser("train", help="train a separation model")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--toy", action="store_true", default=None, help="desk-scale model and training preset")
    p.add_argument("--align-params", type=int, metavar="COUNT",
                   help="align hidden widths of all variants to COUNT parameters and print them")
    p.add_argument("--train-manifest")
    p.add_argument("--valid-manifest")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--trim", type=float, help="fraction of worst ITD/ILD errors dropped")
    p.add_argument("--bypass", choices=("oracle", "mixture"))
    p.add_argument("--angle-buckets", help='e.g. "<15,15-45,45-90,>90" (half-open [lo, hi))')

    for name, text in (("separate", "offline separation of one file"),
                       ("stream", "frame-by-frame separation of one file")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("checkpoint", nargs="?")
        p.add_argument("input", nargs="?")
        p.add_argument("--scene", help="output name prefix (default: input file stem)")
    return parser


def _flag_config(args) -> tuple[dict, dict]:
    """(flag overrides, presets) from parsed arguments."""
    f: dict = {}
    presets: dict = {}
    if args.out:
        f["out_dir"] = args.out
    c = args.command
    if c == "synth":
        ds: dict = {}
        if args.count is not None:
            f["count"] = args.count
        if args.angles is not None:
            ds["azimuth_range"] = _range(args.angles, "azimuth_range")
        if args.seed is not None:
            ds["seed"] = args.seed
        if args.duration is not None:
            ds["duration_s"] = args.duration
        if args.min_separation is not None:
            ds["min_separation_deg"] = args.min_separation
        if args.speakers is not None:
            ds["num_speakers"] = args.speakers
        if args.noise_snr is not None:
            ds["noise_snr_range_db"] = _range(args.noise_snr, "noise_snr_range_db")
        if ds:
            f["dataset"] = ds
    elif c == "train":
        tr: dict = {}
        if args.variant:
            f["variant"] = args.variant
        if args.epochs is not None:
            tr["epochs"] = args.epochs
        if args.seed is not None:
            tr["seed"] = args.seed
            f["model_seed"] = args.seed
        if args.align_params is not None:
            f["align_params"] = args.align_params
        if args.train_manifest:
            f["train_manifest"] = args.train_manifest
        if args.valid_manifest:
            f["valid_manifest"] = args.valid_manifest
        if args.toy:
            f["toy"] = True
        if tr:
            f["train"] = tr
    elif c == "eval":
        for key, val in (("checkpoint", args.checkpoint), ("manifest", args.manifest),
                         ("trim_fraction", args.trim), ("bypass", args.bypass),
                         ("angle_buckets", args.angle_buckets)):
            if val is not None:
                f[key] = val
    else:
        for key, val in (("checkpoint", args.checkpoint), ("input", args.input), ("scene", args.scene)):
            if val is not None:
                f[key] = val
    return f, presets


def _toy_presets(variant: str) -> dict:
    return {"model": toy_config(variant).to_dict(), "train": dict(TOY_TRAIN)}


def _glue_negative_values(argv: list[str]) -> list[str]:
    """Let range flags take values such as "-80:80" without an "=" sign."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("--angles", "--noise-snr") and i + 1 < len(argv):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_glue_negative_values(argv))
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                "separate": cmd_separate, "stream": cmd_stream}
    try:
        file_cfg = _load_config_file(args.config)
        flags, presets = _flag_config(args)
        if args.command == "train":
            toy = flags.get("toy", file_cfg.get("toy", False))
            for item in args.set:
                if item.split("=", 1)[0].strip() == "toy":
                    toy = bool(_parse_value(item.split("=", 1)[1]))
            if toy:
                variant = flags.get("variant", file_cfg.get("variant", "mask_and_sum"))
                presets = _toy_presets(variant if variant in VARIANTS else "mask_and_sum")
        cfg = build_config(args.command, file_cfg, flags, args.set, presets)
        handlers[args.command](cfg)
    except ConfigError as exc:
        print(f"binsep {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"binsep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
