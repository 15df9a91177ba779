"""TasNet variants for binaural separation.

Four variants share one separator design (causal Conv-TasNet TCN):

* ``single``        one encoder, masks from the channel being separated.
* ``feat_concat``   encoder output concatenated with sin/cos IPD and ILD maps.
* ``parallel_sum``  primary + secondary encoder, C masks applied to their sum.
* ``mask_and_sum``  primary + secondary encoder, 2C masks; the masked primary
                    and masked secondary representations are summed.

Each model separates one channel at a time.  The left outputs come from the
pass (primary=left, secondary=right) and the right outputs from the pass with
the roles swapped; both passes share every parameter.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .signal import BinauralSignal, hann_window

VARIANTS = ("single", "feat_concat", "parallel_sum", "mask_and_sum")
ILD_FLOOR = 1e-8


@dataclass
class ModelConfig:
    variant: str = "mask_and_sum"
    num_speakers: int = 2
    encoder_filters: int = 64
    filter_length: int = 16
    encoder_stride: int = 8
    tcn_repeats: int = 4
    blocks_per_repeat: int = 8
    bottleneck_channels: int = 64
    hidden_channels: int = 256
    kernel_size: int = 3
    causal: bool = True
    sample_rate: int = 8000
    stft_window: int = 256
    norm_eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("num_speakers", "encoder_filters", "filter_length", "encoder_stride",
                     "tcn_repeats", "blocks_per_repeat", "bottleneck_channels",
                     "hidden_channels", "kernel_size", "sample_rate", "stft_window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.filter_length % self.encoder_stride:
            raise ValueError("encoder_stride must divide filter_length")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")

    @property
    def num_bins(self) -> int:
        return self.stft_window // 2 + 1

    @property
    def mask_channels(self) -> int:
        k = 2 if self.variant == "mask_and_sum" else 1
        return k * self.num_speakers * self.encoder_filters

    @property
    def separator_inputs(self) -> int:
        N = self.encoder_filters
        if self.variant == "single":
            return N
        if self.variant == "feat_concat":
            return N + 3 * self.num_bins
        return 2 * N

    @property
    def has_secondary_encoder(self) -> bool:
        return self.variant in ("parallel_sum", "mask_and_sum")

    @property
    def latency_samples(self) -> int:
        return self.filter_length

    @property
    def latency_ms(self) -> float:
        return 1000.0 * self.filter_length / self.sample_rate

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def micro_config(variant: str = "mask_and_sum", **overrides) -> ModelConfig:
    """Tiny configuration used for gradient checks and fast tests."""
    base = dict(variant=variant, num_speakers=2, encoder_filters=8, filter_length=4,
                encoder_stride=2, tcn_repeats=1, blocks_per_repeat=2,
                bottleneck_channels=8, hidden_channels=16, stft_window=16)
    base.update(overrides)
    return ModelConfig(**base)


TOY_OVERRIDES = dict(encoder_filters=32, bottleneck_channels=32, hidden_channels=64,
                     tcn_repeats=2, blocks_per_repeat=4)


def toy_config(variant: str = "mask_and_sum", **overrides) -> ModelConfig:
    """Desk-scale configuration for the synthetic-corpus training runs."""
    base = dict(TOY_OVERRIDES, variant=variant)
    base.update(overrides)
    return ModelConfig(**base)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map for a config."""
    N, L = config.encoder_filters, config.filter_length
    B, H, P = config.bottleneck_channels, config.hidden_channels, config.kernel_size
    cin, M = config.separator_inputs, config.mask_channels
    shapes = {"encoder.primary.weight": (N, 1, L), "encoder.primary.bias": (N,)}
    if config.has_secondary_encoder:
        shapes["encoder.secondary.weight"] = (N, 1, L)
        shapes["encoder.secondary.bias"] = (N,)
    shapes["separator.input_norm.gain"] = (cin,)
    shapes["separator.input_norm.bias"] = (cin,)
    shapes["separator.bottleneck.weight"] = (B, cin, 1)
    shapes["separator.bottleneck.bias"] = (B,)
    for i in range(config.tcn_repeats * config.blocks_per_repeat):
        p = f"separator.block{i}."
        shapes[p + "conv_in.weight"] = (H, B, 1)
        shapes[p + "conv_in.bias"] = (H,)
        shapes[p + "prelu1"] = (H,)
        shapes[p + "norm1.gain"] = (H,)
        shapes[p + "norm1.bias"] = (H,)
        shapes[p + "depthwise.weight"] = (H, P)
        shapes[p + "depthwise.bias"] = (H,)
        shapes[p + "prelu2"] = (H,)
        shapes[p + "norm2.gain"] = (H,)
        shapes[p + "norm2.bias"] = (H,)
        shapes[p + "residual.weight"] = (B, H, 1)
        shapes[p + "residual.bias"] = (B,)
        shapes[p + "skip.weight"] = (B, H, 1)
        shapes[p + "skip.bias"] = (B,)
    shapes["separator.output_prelu"] = (B,)
    shapes["separator.head.weight"] = (M, B, 1)
    shapes["separator.head.bias"] = (M,)
    shapes["decoder.weight"] = (N, 1, L)
    shapes["decoder.bias"] = (1,)
    return shapes


def count_params_for(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def _init_value(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("gain"):
        return np.ones(shape)
    if "prelu" in name:
        return np.full(shape, 0.25)
    if name.endswith("bias"):
        return np.zeros(shape)
    if name == "decoder.weight":
        fan_in = shape[0]
    elif len(shape) == 3:
        fan_in = shape[1] * shape[2]
    else:
        fan_in = shape[1]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MaskSet:
    primary: Tensor  # (batch, C, N, F)
    secondary: Tensor | None = None


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None], True
    if x.ndim != 2:
        raise ValueError(f"expected (T,) or (batch, T) audio, got shape {x.shape}")
    return x, False


def padded_length(T: int, L: int, stride: int) -> int:
    """Smallest length >= max(T, L) that fills a whole number of windows."""
    if T <= L:
        return L
    return L + -(-(T - L) // stride) * stride


def ipd_ild_features(x_ref, x_other, window: int = 256, stride: int = 8, filter_length: int = 16) -> np.ndarray:
    """sin(IPD), cos(IPD) and ILD maps aligned to encoder frames.

    The STFT frame for encoder frame f is centred on the centre of that
    encoder window (sample f*stride + filter_length//2), Hann window of
    ``window`` samples, reflect padding.  Returns (..., 3*(window//2+1), F).
    """
    a, squeeze = _as_batch(x_ref)
    b, _ = _as_batch(x_other)
    if a.shape != b.shape:
        raise ValueError("channels must have equal shape")
    T = a.shape[-1]
    if T < filter_length:
        raise ValueError("input shorter than one encoder window")
    F = (T - filter_length) // stride + 1
    half = window // 2
    centres = np.arange(F) * stride + filter_length // 2
    idx = centres[:, None] + np.arange(window)[None, :]  # indices into padded signal
    win = hann_window(window)

    def spec(x):
        xp = np.pad(x, ((0, 0), (half, window - half)), mode="reflect")
        return np.fft.rfft(xp[:, idx] * win, axis=-1)  # (batch, F, bins)

    X, Y = spec(a), spec(b)
    ipd = np.angle(X) - np.angle(Y)
    ild = 10.0 * np.log10(np.maximum(np.abs(X), ILD_FLOOR) / np.maximum(np.abs(Y), ILD_FLOOR))
    feats = np.concatenate([np.sin(ipd), np.cos(ipd), ild], axis=-1).transpose(0, 2, 1)
    return feats[0] if squeeze else feats


def mask_and_sum(primary_rep, secondary_rep, masks: MaskSet) -> Tensor:
    """rep_i = m_primary_i * primary + m_secondary_i * secondary, per speaker."""
    p = ad.reshape(primary_rep, (primary_rep.shape[0], 1) + primary_rep.shape[1:])
    s = ad.reshape(secondary_rep, (secondary_rep.shape[0], 1) + secondary_rep.shape[1:])
    if masks.secondary is None:
        raise ValueError("mask_and_sum needs secondary masks")
    if masks.primary.shape[-2:] != primary_rep.shape[-2:]:
        raise ValueError("mask and representation shapes differ")
    return masks.primary * p + masks.secondary * s


class SeparationModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        config.validate()
        if not config.causal:
            raise ValueError("only causal separators are implemented")
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        for name, shape in parameter_shapes(config).items():
            self.params[name] = Parameter(name, _init_value(name, shape, rng))
        if params is not None:
            self.load_state_dict(params)

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def count_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        expected = parameter_shapes(self.config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter mismatch; missing={missing[:5]} extra={extra[:5]}")
        for k, shape in expected.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ValueError(f"{k}: shape {arr.shape}, expected {shape}")
            self.params[k].data = arr.copy()

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    # -- pipeline stages -------------------------------------------------

    def _encoder(self, which: str, x: np.ndarray) -> Tensor:
        w = self.params[f"encoder.{which}.weight"]
        b = self.params[f"encoder.{which}.bias"]
        return ad.conv1d(x[:, None, :], w, b, stride=self.config.encoder_stride)

    def encode(self, channel_a, channel_b=None) -> tuple[Tensor, Tensor | None]:
        """Primary representation of ``channel_a`` and secondary of ``channel_b``.

        Inputs are (T,) or (batch, T); outputs are (batch, N, F) Tensors with
        F = (T - L) // stride + 1.  ``single`` and ``feat_concat`` return no
        secondary representation.
        """
        a, _ = _as_batch(channel_a)
        L = self.config.filter_length
        if a.shape[-1] < L:
            raise ValueError(f"input of {a.shape[-1]} samples is shorter than one window ({L})")
        primary = self._encoder("primary", a)
        secondary = None
        if self.config.has_secondary_encoder:
            if channel_b is None:
                raise ValueError(f"{self.config.variant} needs the second channel")
            b, _ = _as_batch(channel_b)
            if b.shape != a.shape:
                raise ValueError("channels must have equal length")
            secondary = self._encoder("secondary", b)
        return primary, secondary

    def _block(self, x: Tensor, i: int, dilation: int) -> tuple[Tensor, Tensor]:
        p = self.params
        pre = f"separator.block{i}."
        eps = self.config.norm_eps
        h = ad.conv1d(x, p[pre + "conv_in.weight"], p[pre + "conv_in.bias"])
        h = ad.prelu(h, p[pre + "prelu1"])
        h = ad.cumulative_layer_norm(h, p[pre + "norm1.gain"], p[pre + "norm1.bias"], eps)
        h = ad.depthwise_conv1d(h, p[pre + "depthwise.weight"], p[pre + "depthwise.bias"], dilation)
        h = ad.prelu(h, p[pre + "prelu2"])
        h = ad.cumulative_layer_norm(h, p[pre + "norm2.gain"], p[pre + "norm2.bias"], eps)
        res = ad.conv1d(h, p[pre + "residual.weight"], p[pre + "residual.bias"])
        skip = ad.conv1d(h, p[pre + "skip.weight"], p[pre + "skip.bias"])
        return x + res, skip

    def depthwise_separable_block(self, x: Tensor, index: int, dilation: int):
        """(residual_out, skip_out) of TCN block ``index``."""
        return self._block(ad.as_tensor(x), index, dilation)

    def dilations(self) -> list[int]:
        X = self.config.blocks_per_repeat
        return [2 ** (i % X) for i in range(self.config.tcn_repeats * X)]

    def separator(self, inputs: Tensor) -> Tensor:
        """Mask logits -> sigmoid masks, shape (batch, mask_channels, F)."""
        p = self.params
        h = ad.cumulative_layer_norm(inputs, p["separator.input_norm.gain"],
                                     p["separator.input_norm.bias"], self.config.norm_eps)
        h = ad.conv1d(h, p["separator.bottleneck.weight"], p["separator.bottleneck.bias"])
        skip_sum = None
        for i, d in enumerate(self.dilations()):
            h, skip = self._block(h, i, d)
            skip_sum = skip if skip_sum is None else skip_sum + skip
        out = ad.prelu(skip_sum, p["separator.output_prelu"])
        out = ad.conv1d(out, p["separator.head.weight"], p["separator.head.bias"])
        return ad.sigmoid(out)

    def estimate_masks(self, primary_rep: Tensor, secondary_rep: Tensor | None = None,
                       features=None) -> MaskSet:
        cfg = self.config
        v = cfg.variant
        if v == "single":
            inputs = primary_rep
        elif v == "feat_concat":
            if features is None:
                raise ValueError("feat_concat needs IPD/ILD features")
            features = ad.as_tensor(features)
            if features.shape[-2] != 3 * cfg.num_bins or features.shape[-1] != primary_rep.shape[-1]:
                raise ValueError(f"feature map shape {features.shape} does not match the encoder frames")
            inputs = ad.concat([primary_rep, features], axis=1)
        else:
            if secondary_rep is None:
                raise ValueError(f"{v} needs the secondary representation")
            inputs = ad.concat([primary_rep, secondary_rep], axis=1)
        masks = self.separator(inputs)
        bsz, _, F = masks.shape
        C, N = cfg.num_speakers, cfg.encoder_filters
        if v == "mask_and_sum":
            m = ad.reshape(masks, (bsz, 2, C, N, F))
            return MaskSet(m[:, 0], m[:, 1])
        return MaskSet(ad.reshape(masks, (bsz, C, N, F)))

    def apply_masks(self, primary_rep: Tensor, secondary_rep: Tensor | None, masks: MaskSet) -> Tensor:
        """Source representations (batch, C, N, F)."""
        v = self.config.variant
        if v == "mask_and_sum":
            return mask_and_sum(primary_rep, secondary_rep, masks)
        base = primary_rep if v in ("single", "feat_concat") else primary_rep + secondary_rep
        base = ad.reshape(base, (base.shape[0], 1) + base.shape[1:])
        return masks.primary * base

    def decode(self, source_reps: Tensor, length: int | None = None) -> Tensor:
        """(batch, C, N, F) representations -> (batch, C, T) waveforms."""
        source_reps = ad.as_tensor(source_reps)
        bsz, C, N, F = source_reps.shape
        flat = ad.reshape(source_reps, (bsz * C, N, F))
        wave = ad.transposed_conv1d(flat, self.params["decoder.weight"], self.params["decoder.bias"],
                                    stride=self.config.encoder_stride)
        wave = ad.reshape(wave, (bsz, C, wave.shape[-1]))
        if length is not None:
            wave = wave[:, :, :length]
        return wave

    def separate(self, primary, secondary=None) -> Tensor:
        """Separate the primary channel; returns (batch, C, T) estimates.

        Inputs shorter than a whole number of windows are zero-padded on the
        right and outputs trimmed back to the input length.
        """
        cfg = self.config
        a, _ = _as_batch(primary)
        T = a.shape[-1]
        Tp = padded_length(T, cfg.filter_length, cfg.encoder_stride)
        a = np.pad(a, ((0, 0), (0, Tp - T)))
        b = None
        if secondary is not None:
            b, _ = _as_batch(secondary)
            if b.shape[-1] != T:
                raise ValueError("channels must have equal length")
            b = np.pad(b, ((0, 0), (0, Tp - T)))
        elif cfg.variant != "single":
            raise ValueError(f"{cfg.variant} needs the second channel")
        p, s = self.encode(a, b)
        feats = None
        if cfg.variant == "feat_concat":
            feats = ipd_ild_features(a, b, cfg.stft_window, cfg.encoder_stride, cfg.filter_length)
        masks = self.estimate_masks(p, s, feats)
        reps = self.apply_masks(p, s, masks)
        return self.decode(reps, T)

    def forward_binaural_tensor(self, x_l, x_r) -> Tensor:
        """Batched binaural forward: (batch, T) inputs -> (batch, 2, C, T).

        Both channel passes run as one stacked batch through shared weights.
        """
        left, _ = _as_batch(x_l)
        right, _ = _as_batch(x_r)
        if left.shape != right.shape:
            raise ValueError("left and right channels must have equal length")
        bsz = left.shape[0]
        primary = np.concatenate([left, right], axis=0)
        secondary = np.concatenate([right, left], axis=0)
        est = self.separate(primary, secondary)  # (2*batch, C, T)
        C, T = est.shape[1], est.shape[2]
        est = ad.reshape(est, (2, bsz, C, T))
        # (2, batch, C, T) -> (batch, 2, C, T) via stacking slices
        return ad.concat([ad.reshape(est[0], (bsz, 1, C, T)), ad.reshape(est[1], (bsz, 1, C, T))], axis=1)

    def forward_binaural(self, x_l, x_r) -> list[BinauralSignal]:
        """C binaural estimates for one binaural mixture."""
        x_l = np.asarray(x_l, dtype=np.float64)
        x_r = np.asarray(x_r, dtype=np.float64)
        if x_l.ndim != 1:
            raise ValueError("forward_binaural takes one mixture; use forward_binaural_tensor for batches")
        with ad.no_grad():
            est = self.forward_binaural_tensor(x_l, x_r).data[0]
        return [BinauralSignal(est[0, i], est[1, i], self.config.sample_rate)
                for i in range(self.config.num_speakers)]

    # -- persistence -----------------------------------------------------

    def save(self, path, extra_metadata: dict | None = None) -> str:
        meta = {"model_config": self.config.to_dict()}
        if extra_metadata:
            meta.update(extra_metadata)
        return ad.save_parameters(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "SeparationModel":
        arrays, meta = ad.load_parameters(path)
        if "model_config" not in meta:
            raise ad.CheckpointError(f"{path}: no model_config in metadata")
        config = ModelConfig.from_dict(meta["model_config"])
        model_arrays = {k: v for k, v in arrays.items() if k in parameter_shapes(config)}
        return cls(config, params=model_arrays)


def count_params(model_or_config) -> int:
    if isinstance(model_or_config, SeparationModel):
        return model_or_config.count_params()
    return count_params_for(model_or_config)


class InfeasibleBudget(ValueError):
    pass


BOTTLENECK_CANDIDATES = (64, 48, 80, 32, 96, 128, 16)


def align_param_budget(configs, target_count: int, tolerance: float = 0.02, max_hidden: int = 4096):
    """Choose hidden width (then bottleneck width) so counts hit the target.

    For each config, bottleneck widths are tried in the order: the config's
    own B, then BOTTLENECK_CANDIDATES.  For a given B the largest hidden
    width H (up to ``max_hidden``) whose count does not exceed
    ``target_count * (1 + tolerance)`` is taken; the first B for which that
    count is also at least ``target_count * (1 - tolerance)`` wins.
    Everything else in the config is kept, so the search is deterministic
    and idempotent.
    """
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    single = isinstance(configs, ModelConfig)
    configs = [configs] if single else list(configs)
    lo, hi = target_count * (1 - tolerance), target_count * (1 + tolerance)
    out = []
    for cfg in configs:
        tried = []
        order = [cfg.bottleneck_channels] + [b for b in BOTTLENECK_CANDIDATES if b != cfg.bottleneck_channels]
        chosen = None
        for B in order:
            c1 = count_params_for(cfg.replace(bottleneck_channels=B, hidden_channels=1))
            c2 = count_params_for(cfg.replace(bottleneck_channels=B, hidden_channels=2))
            slope = c2 - c1  # count is affine in H
            best = min(int(math.floor((hi - c1) / slope)) + 1, max_hidden)
            if best < 1:
                tried.append((B, 1, c1))
                continue
            count = c1 + (best - 1) * slope
            tried.append((B, best, count))
            if lo <= count <= hi:
                chosen = cfg.replace(bottleneck_channels=B, hidden_channels=best)
                break
        if chosen is None:
            closest = sorted(tried, key=lambda t: abs(t[2] - target_count))[:3]
            raise InfeasibleBudget(
                f"{cfg.variant}: no width reaches {target_count} +/- {tolerance:.0%}; "
                f"closest (B, H, count): {closest}")
        out.append(chosen)
    return out[0] if single else out
