"""Encoder / residual-decoder segmentation network.

The encoder is a stand-in for a pretrained backbone: ``len(encoder_widths)``
stages of ``[conv3x3 s2, bn, relu, conv3x3, bn, relu]``, so stage ``j`` sits
at stride ``2**(j+1)``. The deepest stage is the bottleneck. Each decoder
stage upsamples by two, concatenates the skip source of matching resolution
(the input image for the last stage, encoder stage ``j`` otherwise), runs a
residual block with its attention gates, and applies dropout. A 1x1 conv and
a sigmoid produce the probability map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .blocks import (
    AttentionFlags,
    BatchNormParams,
    ConvParams,
    ParamFactory,
    ResidualBlockParams,
    hidden_width,
    param_count,
    residual_block,
)
from .errors import ConfigError, ShapeError
from .tensor import (
    RunningStats,
    Tensor,
    concat_channels,
    count_macs,
    dropout,
    relu,
    sigmoid,
    upsample_bilinear2x,
    upsample_nearest2x,
)

SCHEDULES = ("doubling", "halving", "constant")

# keys that do not change the network's structure
_NON_ARCH = {"seed", "encoder_checkpoint", "dropout_rate"}


@dataclass
class ModelConfig:
    input_size: int = 224
    encoder_widths: tuple = (32, 64, 128, 256, 512)
    encoder_frozen: bool = True
    encoder_checkpoint: str = ""
    decoder_initial_filters: int = 64
    decoder_stages: int = 5
    filter_schedule: str = "doubling"
    se: bool = True
    channel: bool = True
    spatial: bool = True
    use_skips: bool = True
    dropout_rate: float = 0.5
    upsample: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)

    def validate(self) -> "ModelConfig":
        if self.decoder_stages != len(self.encoder_widths):
            raise ConfigError(
                f"decoder_stages ({self.decoder_stages}) must equal the number of encoder stages "
                f"({len(self.encoder_widths)}) so every decoder stage has a skip source"
            )
        if any(w <= 0 for w in self.encoder_widths) or self.decoder_initial_filters <= 0:
            raise ConfigError("filter counts must be positive")
        if self.input_size <= 0 or self.input_size % (2 ** self.decoder_stages):
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of 2**{self.decoder_stages}")
        if self.filter_schedule not in SCHEDULES:
            raise ConfigError(f"filter_schedule must be one of {SCHEDULES}, got {self.filter_schedule!r}")
        if self.upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"upsample must be nearest or bilinear, got {self.upsample!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        return self

    def decoder_filters(self) -> list[int]:
        f0 = self.decoder_initial_filters
        if self.filter_schedule == "doubling":
            return [f0 * 2**k for k in range(self.decoder_stages)]
        if self.filter_schedule == "halving":
            return [max(f0 // 2**k, 1) for k in range(self.decoder_stages)]
        return [f0] * self.decoder_stages

    @property
    def flags(self) -> AttentionFlags:
        return AttentionFlags(self.se, self.channel, self.spatial)

    def to_items(self) -> list[tuple[str, str]]:
        items = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            items.append((f.name, str(v)))
        return items

    @classmethod
    def from_items(cls, items: dict) -> "ModelConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown model key {key!r}")
            kwargs[key] = coerce(raw, getattr(defaults, key), key)
        return cls(**kwargs)

    def architecture(self) -> dict:
        return {k: v for k, v in self.to_items() if k not in _NON_ARCH}


def coerce(raw, like, key: str = "?"):
    """Parse a string config value into the type of ``like``."""
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            if not raw:
                return ()
            parts = [p.strip() for p in raw.split(",")]
            if like and isinstance(like[0], float):
                return tuple(float(p) for p in parts)
            return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc
    return raw


@dataclass
class EncoderStage:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        x = relu(self.bn1(self.conv1(x), mode))
        return relu(self.bn2(self.conv2(x), mode))


@dataclass
class Model:
    config: ModelConfig
    encoder: list
    decoder: list
    head: ConvParams
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __call__(self, x: Tensor, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> Tensor:
        return forward(self, x, mode, rng)

    def trainable(self) -> dict:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def conv_weights(self) -> list:
        """Weights subject to L2 regularisation: trainable conv and dense kernels."""
        return [p for k, p in self.params.items() if p.requires_grad and k.endswith(".weight")]

    def state_arrays(self) -> dict:
        out = {f"param:{k}": p.data for k, p in self.params.items()}
        for k, s in self.buffers.items():
            out[f"buffer:{k}.mean"] = s.mean
            out[f"buffer:{k}.var"] = s.var
        return out

    def load_arrays(self, arrays: dict, prefix: str = "") -> int:
        """Copy matching arrays into the model; returns how many were loaded."""
        loaded = 0
        for key, arr in arrays.items():
            kind, _, name = key.partition(":")
            if not name.startswith(prefix):
                continue
            if kind == "param":
                target = self.params.get(name)
                if target is None:
                    raise ConfigError(f"checkpoint parameter {name} not present in model")
                if target.shape != arr.shape:
                    raise ConfigError(f"shape mismatch for {name}: model {target.shape}, file {arr.shape}")
                target.data[...] = arr
                loaded += 1
            elif kind == "buffer":
                base, _, stat = name.rpartition(".")
                stats = self.buffers.get(base)
                if stats is None:
                    raise ConfigError(f"checkpoint buffer {base} not present in model")
                dest = getattr(stats, stat)
                if dest.shape != arr.shape:
                    raise ConfigError(f"shape mismatch for {name}: model {dest.shape}, file {arr.shape}")
                dest[...] = arr
                loaded += 1
        return loaded


def build_model(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> Model:
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params: dict = {}
    buffers: dict = {}

    enc_pf = ParamFactory(rng, "encoder", trainable=not cfg.encoder_frozen)
    enc_pf.params, enc_pf.buffers = params, buffers
    encoder = []
    cin = 3
    for j, width in enumerate(cfg.encoder_widths):
        pf = enc_pf.scope(str(j))
        encoder.append(
            EncoderStage(
                ConvParams.create(pf.scope("conv1"), cin, width, 3, stride=2),
                BatchNormParams.create(pf.scope("bn1"), width),
                ConvParams.create(pf.scope("conv2"), width, width, 3),
                BatchNormParams.create(pf.scope("bn2"), width),
            )
        )
        cin = width

    dec_pf = ParamFactory(rng, "decoder")
    dec_pf.params, dec_pf.buffers = params, buffers
    skip_channels = (3,) + cfg.encoder_widths[:-1]
    decoder = []
    for k, filters in enumerate(cfg.decoder_filters()):
        source = cfg.decoder_stages - 1 - k
        block_in = cin + (skip_channels[source] if cfg.use_skips else 0)
        decoder.append(ResidualBlockParams.create(dec_pf.scope(str(k)), block_in, filters, cfg.flags))
        cin = filters

    head_pf = ParamFactory(rng, "head")
    head_pf.params, head_pf.buffers = params, buffers
    head = ConvParams.create(head_pf, cin, 1, 1)

    model = Model(cfg, encoder, decoder, head, params, buffers)
    if cfg.encoder_checkpoint:
        from .checkpoint import load_encoder

        load_encoder(model, cfg.encoder_checkpoint)
    return model


def forward(m: Model, x: Tensor, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> Tensor:
    cfg = m.config
    s = cfg.input_size
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (s, s):
        raise ShapeError(f"model expects input of shape [N,3,{s},{s}], got {x.shape}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(cfg.seed)
    # a frozen encoder keeps its running statistics, like a frozen pretrained backbone
    enc_mode = "infer" if cfg.encoder_frozen else mode
    up = upsample_nearest2x if cfg.upsample == "nearest" else upsample_bilinear2x

    sources = [x]
    h = x
    for stage in m.encoder:
        h = stage(h, enc_mode)
        sources.append(h)
    for k, block in enumerate(m.decoder):
        h = up(h)
        if cfg.use_skips:
            h = concat_channels(h, sources[cfg.decoder_stages - 1 - k])
        h = residual_block(h, block, mode)
        h = dropout(h, cfg.dropout_rate, mode, rng)
    return sigmoid(m.head(h))


def count_params(m: Model) -> dict:
    total = sum(p.size for p in m.params.values())
    trainable = sum(p.size for p in m.params.values() if p.requires_grad)
    return {"total": total, "trainable": trainable, "frozen": total - trainable}


def attention_param_count(m: Model) -> int:
    return sum(param_count(b.attention.cbam) for b in m.decoder)


def estimate_flops(m: Model, batch: int = 1) -> dict:
    """Analytic multiply-accumulate counts (MACs, not 2x FLOPs) per forward pass."""
    cfg = m.config
    size = cfg.input_size
    enc = 0
    res = size
    for stage in m.encoder:
        res //= 2
        enc += _conv_macs(stage.conv1, res) + _conv_macs(stage.conv2, res)
    dec = 0
    for block in m.decoder:
        res *= 2
        for conv in (block.reduce, block.conv1, block.conv2, block.projection):
            dec += _conv_macs(conv, res)
        c = block.reduce.cout
        if block.attention.se is not None:
            dec += 2 * c * hidden_width(c)
        cbam = block.attention.cbam
        if cbam is not None:
            if block.flags.channel:
                dec += 2 * 2 * c * hidden_width(c)
            if block.flags.spatial:
                dec += _conv_macs(cbam.spatial, res)
    head = _conv_macs(m.head, size)
    return {"encoder": enc * batch, "decoder": dec * batch, "head": head * batch, "total": (enc + dec + head) * batch}


def _conv_macs(conv: Optional[ConvParams], out_res: int) -> int:
    if conv is None:
        return 0
    cout, cin, kh, kw = conv.weight.shape
    return cout * cin * kh * kw * out_res * out_res


def measured_macs(m: Model, batch: int = 1) -> int:
    """MACs counted by instrumenting an actual inference pass."""
    s = m.config.input_size
    with count_macs() as counter:
        forward(m, Tensor(np.zeros((batch, 3, s, s))), "infer")
    return counter.total
