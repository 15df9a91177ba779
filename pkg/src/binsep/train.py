"""Training loop, checkpoints and manifest evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics
from .model import ModelConfig, SeparationModel, parameter_shapes
from .scene import load_manifest, load_scene

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    objective: str = "snr"
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_patience: int = 3
    early_stop_patience: int | None = None
    clip_norm: float = 5.0
    batch_size: int = 4
    epochs: int = 10
    segment_seconds: float = 2.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in ("snr", "si_sdr"):
            raise ValueError("objective must be 'snr' or 'si_sdr'")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.segment_seconds <= 0:
            raise ValueError("segment_seconds must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# data


@dataclass
class SceneData:
    scene_id: str
    mixture: np.ndarray  # (2, T)
    targets: np.ndarray  # (C, 2, T)
    azimuths_deg: list = field(default_factory=list)


def load_scenes(manifest, sample_rate: int = 8000) -> list[SceneData]:
    """Load every scene of a manifest (path or (records, base_dir) pair)."""
    if isinstance(manifest, tuple):
        records, base = manifest
    else:
        records, base = load_manifest(manifest)
    scenes = []
    for r in records:
        mix, targets = load_scene(r, base, sample_rate)
        scenes.append(SceneData(r["scene_id"], mix.data, np.stack([t.data for t in targets]),
                                list(r.get("azimuths_deg", []))))
    return scenes


def _pit_loss(est: ad.Tensor, targets: np.ndarray, objective: str = "snr"):
    """Negative mean objective under the best speaker permutation.

    est is (batch, 2, C, T), targets (batch, C, 2, T).  The permutation is
    chosen per scene with both channels of a speaker tied together.
    """
    bsz, _, C, T = est.shape
    tgt = targets.transpose(0, 2, 1, 3)  # (batch, 2, C, T)
    aligned = np.empty_like(tgt)
    perms = []
    for b in range(bsz):
        M = metrics.objective_matrix(list(targets[b]), [est.data[b, :, j] for j in range(C)], objective)
        perm, _ = metrics.best_permutation(M)
        perms.append(perm)
        for i, j in enumerate(perm):
            aligned[b, :, j] = tgt[b, :, i]
    power = np.sum(aligned * aligned, axis=-1)  # (batch, 2, C)
    if objective == "snr":
        err = ad.tsum(ad.square(est - aligned), axis=-1) + metrics.EPS_REL * power
        db = 10.0 / math.log(10.0) * (ad.log(err) - np.log(power))
    else:
        alpha = ad.tsum(est * aligned, axis=-1) / power
        scaled = ad.reshape(alpha, alpha.shape + (1,)) * aligned
        tp = ad.tsum(ad.square(scaled), axis=-1)
        err = ad.tsum(ad.square(est - scaled), axis=-1) + tp * metrics.EPS_REL
        db = 10.0 / math.log(10.0) * (ad.log(err) - ad.log(tp))
    return ad.mean(db), perms


def _crop_batch(scenes, idx, seg_len, rng, stats):
    mixes, tgts = [], []
    for i in idx:
        s = scenes[i]
        T = s.mixture.shape[-1]
        if seg_len >= T:
            mixes.append(s.mixture)
            tgts.append(s.targets)
            continue
        full_power = np.sum(s.targets ** 2, axis=-1) / T  # (C, 2)
        for _ in range(20):
            start = int(rng.integers(0, T - seg_len + 1))
            crop = s.targets[..., start:start + seg_len]
            power = np.sum(crop ** 2, axis=-1) / seg_len
            if np.all(power > 1e-3 * full_power):
                break
            stats["resampled"] += 1
        mixes.append(s.mixture[:, start:start + seg_len])
        tgts.append(crop)
    return np.stack(mixes), np.stack(tgts)


def validation_loss(model: SeparationModel, scenes, objective: str = "snr", batch_size: int = 8) -> float:
    """Mean PIT loss over full utterances (no cropping)."""
    total, n = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            lengths = {s.mixture.shape[-1] for s in chunk}
            groups = [chunk] if len(lengths) == 1 else [[s] for s in chunk]
            for g in groups:
                mix = np.stack([s.mixture for s in g])
                est = model.forward_binaural_tensor(mix[:, 0], mix[:, 1])
                loss, _ = _pit_loss(est, np.stack([s.targets for s in g]), objective)
                total += float(loss.data) * len(g)
                n += len(g)
    return total / n


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: SeparationModel, optimizer: Adam | None = None, epoch: int = 0,
                    history: list | None = None, train_config: TrainConfig | None = None) -> str:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = {"model_config": model.config.to_dict(), "epoch": epoch, "history": history or []}
    if train_config is not None:
        meta["train_config"] = train_config.to_dict()
    if optimizer is not None:
        for k in model.params:
            arrays[f"adam.m/{k}"] = optimizer.m[k]
            arrays[f"adam.v/{k}"] = optimizer.v[k]
        meta["optimizer"] = {"step": optimizer.step_count, "lr": optimizer.lr}
    return ad.save_parameters(path, arrays, meta)


def load_checkpoint(path) -> tuple[SeparationModel, dict, dict]:
    """(model, metadata, optimizer arrays) from a checkpoint or bare model file."""
    arrays, meta = ad.load_parameters(path)
    config = ModelConfig.from_dict(meta["model_config"])
    if any(k.startswith("model/") for k in arrays):
        params = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    else:
        names = parameter_shapes(config)
        params = {k: v for k, v in arrays.items() if k in names}
    opt = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return SeparationModel(config, params=params), meta, opt


@dataclass
class TrainResult:
    model: SeparationModel
    history: list
    best_state: dict
    best_valid_loss: float
    checkpoints: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)
    resampled_segments: int = 0


def train(model: SeparationModel, train_manifest, valid_manifest, config: TrainConfig,
          out_dir=None, sample_rate: int | None = None) -> TrainResult:
    """Train ``model`` in place and return the loss history.

    Manifests may be paths, (records, base_dir) pairs or pre-loaded lists of
    SceneData.  Each step crops one random segment per scene, runs both
    channel passes, takes the PIT loss, clips the global gradient norm and
    applies Adam.  After each epoch the full-utterance validation loss drives
    learning-rate decay and best-state retention.  The model ends holding
    the best validation state.
    """
    sr = sample_rate or model.config.sample_rate
    train_scenes = train_manifest if _is_loaded(train_manifest) else load_scenes(train_manifest, sr)
    valid_scenes = valid_manifest if _is_loaded(valid_manifest) else load_scenes(valid_manifest, sr)
    if not train_scenes or not valid_scenes:
        raise ValueError("training and validation manifests must be non-empty")
    C = model.config.num_speakers
    for s in train_scenes + valid_scenes:
        if s.targets.shape[0] != C:
            raise ValueError(f"scene {s.scene_id} has {s.targets.shape[0]} speakers; model expects {C}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    seg_len = int(round(config.segment_seconds * sr))
    history, train_losses, checkpoints = [], [], []
    stats = {"resampled": 0}
    best_state = model.state_dict()
    best_loss = validation_loss(model, valid_scenes, config.objective) if config.epochs == 0 else math.inf
    bad_epochs = stop_epochs = 0
    n = len(train_scenes)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            mix, tgt = _crop_batch(train_scenes, idx, seg_len, rng, stats)
            model.zero_grad()
            est = model.forward_binaural_tensor(mix[:, 0], mix[:, 1])
            finite = bool(np.all(np.isfinite(est.data)))
            if finite:
                loss, _ = _pit_loss(est, tgt, config.objective)
                value = float(loss.data)
            if not finite or not math.isfinite(value):
                batch_id = f"epoch{epoch}_batch{bi}"
                if out is not None:
                    np.savez(out / f"diverged_{batch_id}.npz", mixture=mix, targets=tgt, scene_index=idx)
                raise TrainingDiverged(f"non-finite loss at {batch_id} (scenes {idx.tolist()})")
            loss.backward()
            clip_gradients(model.parameters(), config.clip_norm)
            opt.step()
            epoch_losses.append(value)
        train_losses.extend(epoch_losses)
        valid = validation_loss(model, valid_scenes, config.objective)
        record = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "valid_loss": valid,
                  "lr": opt.lr, "wall_time": time.perf_counter() - t0}
        history.append(record)
        log.info("epoch %d train %.3f valid %.3f lr %.2e", epoch, record["train_loss"], valid, opt.lr)
        if out is not None:
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if valid < best_loss:
            best_loss = valid
            best_state = model.state_dict()
            bad_epochs = stop_epochs = 0
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, opt, epoch, history, config)
        else:
            bad_epochs += 1
            stop_epochs += 1
            if bad_epochs >= config.lr_patience:
                opt.lr *= config.lr_decay_factor
                bad_epochs = 0
        if out is not None:
            path = out / f"epoch{epoch:03d}.ckpt"
            save_checkpoint(path, model, opt, epoch, history, config)
            checkpoints.append(str(path))
        if config.early_stop_patience is not None and stop_epochs >= config.early_stop_patience:
            break
    model.load_state_dict(best_state)
    if out is not None and config.epochs == 0:
        save_checkpoint(out / "best.ckpt", model, opt, 0, history, config)
    return TrainResult(model, history, best_state, best_loss, checkpoints, train_losses, stats["resampled"])


def _is_loaded(x) -> bool:
    return isinstance(x, list) and (not x or isinstance(x[0], SceneData))


# ---------------------------------------------------------------------------
# evaluation


def _angle(az: list) -> float | None:
    if len(az) < 2:
        return None
    diffs = [abs(a - b) for i, a in enumerate(az) for b in az[i + 1:]]
    return float(min(diffs))


def evaluate_scene(scene: SceneData, estimates: np.ndarray, sample_rate: int = 8000,
                   objective: str = "snr") -> list[metrics.UtteranceMetrics]:
    """Metrics for one scene; ``estimates`` is (C, 2, T)."""
    C = scene.targets.shape[0]
    perm, _ = metrics.pit_assign(list(scene.targets), list(estimates), objective)
    angle = _angle(scene.azimuths_deg)
    rows = []
    for i in range(C):
        t, e = scene.targets[i], estimates[perm[i]]
        snri = metrics.snr_improvement(scene.mixture, t, e)
        sisdr = 0.5 * (metrics.si_sdr(t[0], e[0]) + metrics.si_sdr(t[1], e[1]))
        capped = any(metrics.snr(t[c], e[c]) >= metrics.SNR_CAP_DB - 1e-9 for c in range(2))
        try:
            itd = metrics.itd_error(t, e, sample_rate)
        except metrics.UndefinedMetric:
            itd = None
        try:
            ild = metrics.ild_error(t, e)
        except metrics.UndefinedMetric:
            ild = None
        rows.append(metrics.UtteranceMetrics(scene.scene_id, i, snri, sisdr, itd, ild, list(perm), angle, capped))
    return rows


def evaluate(model: SeparationModel | None, test_manifest, trim_fraction: float = 0.05,
             bypass: str | None = None, sample_rate: int | None = None) -> metrics.MetricsReport:
    """Separate every scene and aggregate metrics.

    ``bypass="oracle"`` uses the targets as estimates and ``bypass="mixture"``
    uses the unprocessed mixture; both ignore ``model``.
    """
    sr = sample_rate or (model.config.sample_rate if model is not None else 8000)
    scenes = test_manifest if _is_loaded(test_manifest) else load_scenes(test_manifest, sr)
    rows = []
    for s in scenes:
        C = s.targets.shape[0]
        if bypass == "oracle":
            est = s.targets.copy()
        elif bypass == "mixture":
            est = np.stack([s.mixture] * C)
        elif bypass is None:
            if model is None:
                raise ValueError("evaluate needs a model unless a bypass is chosen")
            with ad.no_grad():
                out = model.forward_binaural_tensor(s.mixture[0], s.mixture[1]).data[0]  # (2, C, T)
            est = out.transpose(1, 0, 2)
        else:
            raise ValueError(f"unknown bypass {bypass!r}")
        rows.extend(evaluate_scene(s, est, sr))
    settings = {"gcc_max_lag_s": metrics.GCC_MAX_LAG_S, "gcc_upsample": metrics.GCC_UPSAMPLE,
                "phat_floor": metrics.PHAT_FLOOR, "snr_cap_db": metrics.SNR_CAP_DB,
                "trim_fraction": trim_fraction, "bypass": bypass}
    return metrics.MetricsReport(rows, metrics.aggregate(rows, trim_fraction), settings)
