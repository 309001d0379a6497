import numpy as np
import pytest

from betternet.model import ModelConfig
from betternet.tensor import Tensor, mul, tsum


def weighted_sum(t: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe with random weights; a plain sum is blind to anything mean-free (e.g. after BN)."""
    w = np.random.default_rng(seed).uniform(0.5, 1.5, size=t.shape) * np.where(
        np.random.default_rng(seed + 1).random(t.shape) < 0.5, -1.0, 1.0
    )
    return tsum(mul(t, Tensor(w)))


def tiny_config(**kw) -> ModelConfig:
    """Reference tiny network used across tests and the acceptance suite."""
    base = dict(
        input_size=96,
        encoder_widths=(8, 16, 32, 64, 128),
        decoder_initial_filters=16,
        filter_schedule="constant",
        encoder_frozen=False,
        dropout_rate=0.5,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param_grad_error(loss_fn, param: Tensor, indices, h: float = 1e-5) -> float:
    """Relative gradient error for a parameter used in place by ``loss_fn``."""
    from betternet.tensor import GradTape, backward

    param.grad = None
    with GradTape():
        loss = loss_fn()
    backward(loss)
    analytic = param.grad.reshape(-1).copy()
    flat = param.data.reshape(-1)
    worst = 0.0
    for i in indices:
        keep = flat[i]
        flat[i] = keep + h
        fp = loss_fn().item()
        flat[i] = keep - h
        fm = loss_fn().item()
        flat[i] = keep
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8))
    return worst


def hand_param_count(cfg: ModelConfig) -> int:
    """Layer-by-layer parameter count written from the architecture description."""
    conv = lambda cin, cout, k: cout * cin * k * k + cout
    bn = lambda c: 2 * c
    fc = lambda i, o: i * o + o
    hid = lambda c: max(c // 16, 4)

    total, cin = 0, 3
    for w in cfg.encoder_widths:
        total += conv(cin, w, 3) + bn(w) + conv(w, w, 3) + bn(w)
        cin = w
    skips = (3,) + tuple(cfg.encoder_widths[:-1])
    for k, f in enumerate(cfg.decoder_filters()):
        block_in = cin + (skips[len(skips) - 1 - k] if cfg.use_skips else 0)
        total += conv(block_in, f, 1) + conv(f, f, 3) + bn(f) + conv(f, f, 3) + bn(f)
        if cfg.se:
            total += fc(f, hid(f)) + fc(hid(f), f)
        if cfg.channel or cfg.spatial:
            total += fc(f, hid(f)) + fc(hid(f), f) + conv(2, 1, 7)
        if block_in != f:
            total += conv(block_in, f, 1)
        cin = f
    return total + conv(cin, 1, 1)


def fd_check(loss_fn, target: Tensor, indices, h: float = 1e-6, tol: float = 1e-4):
    """Finite-difference check of ``target.grad`` for a piecewise-smooth loss.

    A relu network is only piecewise differentiable, so a step of size ``h``
    can cross a kink. Such coordinates are detected from the function values
    alone (forward and backward one-sided slopes disagree by more than
    ``tol``) and skipped; the backward pass plays no part in that decision.
    Returns (max relative error over smooth coordinates, number skipped).
    """
    from betternet.tensor import GradTape, backward

    target.grad = None
    with GradTape():
        loss = loss_fn()
    backward(loss)
    analytic = target.grad.reshape(-1).copy()
    flat = target.data.reshape(-1)
    f0 = loss_fn().item()
    worst, skipped = 0.0, 0
    for i in indices:
        keep = flat[i]
        flat[i] = keep + h
        fp = loss_fn().item()
        flat[i] = keep - h
        fm = loss_fn().item()
        flat[i] = keep
        up, down = (fp - f0) / h, (f0 - fm) / h
        if abs(up - down) > tol * max(abs(up), abs(down), 1e-8):
            skipped += 1
            continue
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8))
    return worst, skipped


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
