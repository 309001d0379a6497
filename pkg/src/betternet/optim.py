"""Adam with bias correction and the polynomial learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LRSchedule:
    lr_start: float = 1e-4
    lr_end: float = 1e-7
    total_epochs: int = 150
    power: float = 1.0

    def validate(self) -> "LRSchedule":
        if not self.lr_start > self.lr_end > 0:
            raise ConfigError(f"need lr_start > lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.total_epochs <= 0 or self.power <= 0:
            raise ConfigError("total_epochs and power must be positive")
        return self


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    seed: int = 0
    lr: float = 0.0
    adam: Optional[AdamState] = None


def poly_lr(epoch: float, sched: LRSchedule) -> float:
    """lr_end + (lr_start - lr_end) * (1 - epoch/total)**power, exact at both ends."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch > sched.total_epochs:
        log.warning("epoch %s beyond schedule length %s; clamping to lr_end", epoch, sched.total_epochs)
        return sched.lr_end
    frac = (1.0 - epoch / sched.total_epochs) ** sched.power
    # convex-combination form returns lr_start/lr_end bit-exactly at frac 1/0
    return sched.lr_start * frac + sched.lr_end * (1.0 - frac)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on ``params[name].data``.

    ``grads`` maps the same names to gradient arrays; a name absent from
    ``grads`` (or mapped to None) is left untouched. Returns ``(params, state)``.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grads_of(params: dict) -> dict:
    return {k: p.grad for k, p in params.items() if isinstance(p, Tensor) and p.grad is not None}
