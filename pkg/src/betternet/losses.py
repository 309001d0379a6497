"""Segmentation objective: clamped BCE, soft Dice, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, LabelError, ShapeError
from .tensor import Tensor, add, clamp, div, log, mul, reshape, sub, tmean, tsum


@dataclass
class LossConfig:
    alpha: float = 0.5
    epsilon_dice: float = 1e-6
    prob_clamp: float = 1e-7
    l2_lambda: float = 0.0
    objective: str = "total"  # or "bce"

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.epsilon_dice <= 0 or not 0 < self.prob_clamp < 0.5:
            raise ConfigError("epsilon_dice and prob_clamp must be small positive numbers")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be non-negative")
        if self.objective not in ("total", "bce"):
            raise ConfigError(f"objective must be 'total' or 'bce', got {self.objective!r}")
        return self


def _const(y) -> Tensor:
    return y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))


def _same_shape(p: Tensor, y: Tensor, what: str) -> None:
    if p.shape != y.shape:
        raise ShapeError(f"{what}: prediction {p.shape} and target {y.shape} differ")


def bce_loss(p: Tensor, y, prob_clamp: float = 1e-7) -> Tensor:
    """Mean over every pixel of -[y log p + (1-y) log(1-p)], p clamped away from 0 and 1."""
    y = _const(y)
    _same_shape(p, y, "bce_loss")
    if not np.all((y.data == 0) | (y.data == 1)):
        raise LabelError("bce_loss targets must be 0 or 1")
    pc = clamp(p, prob_clamp, 1.0 - prob_clamp)
    per_pixel = add(mul(y, log(pc)), mul(sub(1.0, y), log(sub(1.0, pc))))
    return mul(tmean(per_pixel), -1.0)


def dice_loss(p: Tensor, g, eps: float = 1e-6) -> Tensor:
    """Soft Dice loss, computed per image (leading axis of a 4-D batch) and averaged."""
    g = _const(g)
    _same_shape(p, g, "dice_loss")
    n = p.shape[0] if p.ndim == 4 else 1
    pf = reshape(p, (n, -1))
    gf = reshape(g, (n, -1))
    inter = tsum(mul(pf, gf), axis=1)
    total = add(tsum(pf, axis=1), tsum(gf, axis=1))
    ratio = div(add(mul(inter, 2.0), eps), add(total, eps))
    return tmean(sub(1.0, ratio))


def l2_penalty(weights: Iterable[Tensor]) -> Optional[Tensor]:
    terms = [tsum(mul(w, w)) for w in weights]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def total_loss(p: Tensor, g, cfg: Optional[LossConfig] = None, weights: Iterable[Tensor] = ()) -> Tensor:
    """alpha * BCE + (1 - alpha) * Dice, plus l2_lambda * sum(w^2) over ``weights``."""
    cfg = cfg or LossConfig()
    if cfg.objective == "bce":
        loss = bce_loss(p, g, cfg.prob_clamp)
    else:
        loss = add(
            mul(bce_loss(p, g, cfg.prob_clamp), cfg.alpha),
            mul(dice_loss(p, g, cfg.epsilon_dice), 1.0 - cfg.alpha),
        )
    if cfg.l2_lambda > 0:
        penalty = l2_penalty(weights)
        if penalty is not None:
            loss = add(loss, mul(penalty, cfg.l2_lambda))
    return loss
