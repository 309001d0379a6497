"""Decoder building blocks: squeeze-and-excitation, CBAM-style channel and
spatial attention, and the residual decoder block.

Every block is a pure function of ``(x, params)``. Parameter containers are
plain dataclasses of :class:`~betternet.tensor.Tensor` objects, created
through a :class:`ParamFactory` so that a model can register them by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    dense,
    global_avg_pool,
    global_max_pool,
    mul,
    relu,
    reshape,
    sigmoid,
    tmax,
    tmean,
)

SE_RATIO = 16
MIN_HIDDEN = 4
SPATIAL_KERNEL = 7


def hidden_width(channels: int, ratio: int = SE_RATIO) -> int:
    """Bottleneck width of the SE / channel-attention MLP."""
    if ratio < 1:
        raise ValueError("reduction ratio must be >= 1")
    return max(channels // ratio, MIN_HIDDEN)


class ParamFactory:
    """Creates He-uniform initialised parameters and records them by name."""

    def __init__(self, rng: np.random.Generator, prefix: str = "", trainable: bool = True, dtype=np.float64):
        self.rng = rng
        self.prefix = prefix
        self.trainable = trainable
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, RunningStats] = {}

    def scope(self, name: str) -> "ParamFactory":
        child = ParamFactory(self.rng, self._full(name), self.trainable, self.dtype)
        child.params = self.params
        child.buffers = self.buffers
        return child

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        full = self._full(name)
        if full in self.params:
            raise KeyError(f"duplicate parameter name {full}")
        t = Tensor(data.astype(self.dtype), requires_grad=self.trainable, name=full)
        self.params[full] = t
        return t

    def he_uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        limit = np.sqrt(6.0 / fan_in)
        return self._register(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self._register(name, np.ones(shape))

    def running_stats(self, name: str, channels: int) -> RunningStats:
        full = self._full(name)
        stats = RunningStats(channels, self.dtype)
        self.buffers[full] = stats
        return stats


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @classmethod
    def create(cls, pf: ParamFactory, cin: int, cout: int, k: int, stride: int = 1) -> "ConvParams":
        w = pf.he_uniform("weight", (cout, cin, k, k), fan_in=cin * k * k)
        b = pf.zeros("bias", (cout,))
        return cls(w, b, stride, (k - 1) // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, pf: ParamFactory, channels: int) -> "BatchNormParams":
        return cls(pf.ones("gamma", (channels,)), pf.zeros("beta", (channels,)), pf.running_stats("running", channels))

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, mode, self.momentum, self.eps)


@dataclass
class DenseParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, pf: ParamFactory, fin: int, fout: int) -> "DenseParams":
        return cls(pf.he_uniform("weight", (fin, fout), fan_in=fin), pf.zeros("bias", (fout,)))

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


@dataclass
class SEBlockParams:
    reduce: DenseParams
    expand: DenseParams

    @classmethod
    def create(cls, pf: ParamFactory, channels: int, ratio: int = SE_RATIO) -> "SEBlockParams":
        hid = hidden_width(channels, ratio)
        return cls(DenseParams.create(pf.scope("reduce"), channels, hid), DenseParams.create(pf.scope("expand"), hid, channels))

    @property
    def channels(self) -> int:
        return self.reduce.weight.shape[0]


@dataclass
class AttentionParams:
    """Shared channel-attention MLP plus the 2->1 spatial-attention conv."""

    mlp_reduce: DenseParams
    mlp_expand: DenseParams
    spatial: ConvParams

    @classmethod
    def create(cls, pf: ParamFactory, channels: int, ratio: int = SE_RATIO, kernel: int = SPATIAL_KERNEL) -> "AttentionParams":
        if kernel % 2 == 0:
            raise ValueError(f"spatial attention kernel must be odd, got {kernel}")
        hid = hidden_width(channels, ratio)
        return cls(
            DenseParams.create(pf.scope("mlp_reduce"), channels, hid),
            DenseParams.create(pf.scope("mlp_expand"), hid, channels),
            ConvParams.create(pf.scope("spatial"), 2, 1, kernel),
        )

    @property
    def channels(self) -> int:
        return self.mlp_reduce.weight.shape[0]


@dataclass
class AttentionFlags:
    se: bool = True
    channel: bool = True
    spatial: bool = True


@dataclass
class AttentionSuiteParams:
    se: Optional[SEBlockParams] = None
    cbam: Optional[AttentionParams] = None


@dataclass
class ResidualBlockParams:
    reduce: ConvParams
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    attention: AttentionSuiteParams = field(default_factory=AttentionSuiteParams)
    flags: AttentionFlags = field(default_factory=AttentionFlags)
    projection: Optional[ConvParams] = None

    @classmethod
    def create(cls, pf: ParamFactory, cin: int, cout: int, flags: Optional[AttentionFlags] = None) -> "ResidualBlockParams":
        flags = flags or AttentionFlags()
        att = AttentionSuiteParams(
            se=SEBlockParams.create(pf.scope("se"), cout) if flags.se else None,
            cbam=AttentionParams.create(pf.scope("cbam"), cout) if (flags.channel or flags.spatial) else None,
        )
        return cls(
            reduce=ConvParams.create(pf.scope("reduce"), cin, cout, 1),
            conv1=ConvParams.create(pf.scope("conv1"), cout, cout, 3),
            bn1=BatchNormParams.create(pf.scope("bn1"), cout),
            conv2=ConvParams.create(pf.scope("conv2"), cout, cout, 3),
            bn2=BatchNormParams.create(pf.scope("bn2"), cout),
            attention=att,
            flags=flags,
            projection=ConvParams.create(pf.scope("projection"), cin, cout, 1) if cin != cout else None,
        )


def _check_channels(x: Tensor, channels: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channels, got input shape {x.shape}")


def _mlp(v: Tensor, reduce: DenseParams, expand: DenseParams) -> Tensor:
    return expand(relu(reduce(v)))


def se_block(x: Tensor, p: SEBlockParams) -> Tensor:
    """Squeeze (global average pool), excite (MLP + sigmoid), rescale channels."""
    _check_channels(x, p.channels, "se_block")
    n, c = x.shape[:2]
    squeezed = reshape(global_avg_pool(x), (n, c))
    scale = sigmoid(_mlp(squeezed, p.reduce, p.expand))
    return mul(x, reshape(scale, (n, c, 1, 1)))


def channel_attention(x: Tensor, p: AttentionParams) -> Tensor:
    _check_channels(x, p.channels, "channel_attention")
    n, c = x.shape[:2]
    avg = _mlp(reshape(global_avg_pool(x), (n, c)), p.mlp_reduce, p.mlp_expand)
    mx = _mlp(reshape(global_max_pool(x), (n, c)), p.mlp_reduce, p.mlp_expand)
    scale = sigmoid(add(avg, mx))
    return mul(x, reshape(scale, (n, c, 1, 1)))


def spatial_attention(x: Tensor, p: AttentionParams) -> Tensor:
    k = p.spatial.weight.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"spatial attention kernel must be odd, got {k}")
    pooled = concat_channels(tmean(x, axis=1, keepdims=True), tmax(x, axis=1, keepdims=True))
    gate = sigmoid(conv2d(pooled, p.spatial.weight, p.spatial.bias, 1, (k - 1) // 2))
    return mul(x, gate)


def attention_suite(x: Tensor, params: AttentionSuiteParams, flags: AttentionFlags) -> Tensor:
    """Apply the enabled gates in the order SE -> channel -> spatial."""
    if flags.se:
        x = se_block(x, params.se)
    if flags.channel:
        x = channel_attention(x, params.cbam)
    if flags.spatial:
        x = spatial_attention(x, params.cbam)
    return x


def residual_block(x: Tensor, p: ResidualBlockParams, mode: str = "train") -> Tensor:
    """relu(attention(bn(conv3x3(relu(bn(conv3x3(relu(conv1x1(x)))))))) + shortcut(x))."""
    _check_channels(x, p.reduce.cin, "residual_block")
    if (p.projection is None) != (p.reduce.cin == p.reduce.cout):
        raise ShapeError("residual_block: projection must exist exactly when channels change")
    h = relu(p.reduce(x))
    h = relu(p.bn1(p.conv1(h), mode))
    h = p.bn2(p.conv2(h), mode)
    h = attention_suite(h, p.attention, p.flags)
    shortcut = x if p.projection is None else p.projection(x)
    return relu(add(h, shortcut))


def param_count(obj) -> int:
    """Total number of scalar parameters held (recursively) by a params dataclass."""
    if obj is None:
        return 0
    if isinstance(obj, Tensor):
        return obj.size
    if isinstance(obj, (RunningStats, AttentionFlags, int, float)):
        return 0
    if hasattr(obj, "__dataclass_fields__"):
        return sum(param_count(getattr(obj, f)) for f in obj.__dataclass_fields__)
    return 0
