"""Training loop, batch prediction and evaluation helpers."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import SamplePair, binarize, load_dataset, morphological, parse_morph
from .errors import NumericError
from .losses import total_loss
from .metrics import MetricReport, dice, evaluate_dataset, iou
from .model import Model, build_model, forward
from .optim import AdamState, TrainState, adam_step, grads_of, poly_lr
from .tensor import GradTape, Tensor, backward

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "lr", "train_loss", "val_mdice", "val_miou")


def format_lr(lr: float) -> str:
    """Compact scientific notation: 1e-4 -> '1.0e-4', 5.005e-05 -> '5.005e-5'."""
    mant, _, exp = f"{lr:.6e}".partition("e")
    mant = mant.rstrip("0")
    if mant.endswith("."):
        mant += "0"
    return f"{mant}e{int(exp)}"


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.6f}"


def stack(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.image for p in pairs]).astype(np.float64)
    y = np.stack([p.mask for p in pairs]).astype(np.float64)[:, None]
    return x, y


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Soft probability maps ``(N, H, W)`` in inference mode."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(model, Tensor(images[i : i + batch_size]), "infer").data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:])


def postprocess(probs: np.ndarray, threshold: float, morph: Optional[str]) -> np.ndarray:
    """Apply optional open/close to the binarised map.

    Returns the probability map itself when no morphology is requested; with
    morphology the cleaned binary mask replaces it so every metric sees the
    post-processed output.
    """
    spec = parse_morph(morph)
    if spec is None:
        return probs
    op, r = spec
    return morphological(binarize(probs, threshold), op, r)


def evaluate_model(
    model: Model,
    pairs: Sequence[SamplePair],
    threshold: float = 0.5,
    morph: Optional[str] = None,
    batch_size: int = 8,
) -> MetricReport:
    if not pairs:
        raise ValueError("cannot evaluate on an empty dataset")
    x, _ = stack(pairs)
    probs = predict(model, x, batch_size)
    preds = [postprocess(p, threshold, morph) for p in probs]
    return evaluate_dataset(
        [(p, s.mask) for p, s in zip(preds, pairs)],
        threshold=threshold,
        names=[s.source for s in pairs],
        morph=morph or "none",
    )


def quick_scores(model: Model, pairs: Sequence[SamplePair], threshold: float = 0.5) -> tuple[float, float]:
    """Mean Dice and IoU only; the cheap per-epoch validation hook."""
    if not pairs:
        return float("nan"), float("nan")
    x, _ = stack(pairs)
    probs = predict(model, x)
    d = math.fsum(dice(p, s.mask, threshold) for p, s in zip(probs, pairs)) / len(pairs)
    j = math.fsum(iou(p, s.mask, threshold) for p, s in zip(probs, pairs)) / len(pairs)
    return d, j


def train_step(model: Model, x: np.ndarray, y: np.ndarray, cfg: RunConfig, state: TrainState, lr: float, rng) -> float:
    model.zero_grad()
    params = model.trainable()
    weights = model.conv_weights() if cfg.loss.l2_lambda > 0 else ()
    with GradTape():
        p = forward(model, Tensor(x), "train", rng)
        loss = total_loss(p, y, cfg.loss, weights)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {state.epoch} step {state.step}")
        backward(loss)
    adam_step(params, grads_of(params), state.adam, lr)
    # saturated probabilities keep the clamped loss finite even when weights blow up
    bad = [k for k, t in params.items() if not np.isfinite(t.data).all()]
    if bad:
        raise NumericError(f"non-finite parameter {bad[0]} after epoch {state.epoch} step {state.step}")
    state.step += 1
    return value


@dataclass
class TrainResult:
    model: Model
    state: TrainState
    history: list = field(default_factory=list)
    test_report: Optional[MetricReport] = None
    out_dir: Optional[Path] = None


def train(cfg: RunConfig, out_dir=None, splits: Optional[dict] = None) -> TrainResult:
    """Run a full training job, writing logs and checkpoints into ``out_dir``.

    ``splits`` (train/val/test lists) may be passed to reuse data already in
    memory; otherwise the configured dataset is loaded.
    """
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    if splits is None:
        splits = load_dataset(cfg.dataset)
    train_set, val_set, test_set = splits["train"], splits.get("val", []), splits.get("test", [])
    if not train_set and cfg.epochs > 0:
        raise ValueError("training split is empty")
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg.model)
    state = TrainState(seed=cfg.seed, lr=poly_lr(0, cfg.schedule), adam=AdamState())
    save_checkpoint(model, state, out / "initial.ckpt")
    result = TrainResult(model, state, out_dir=out)
    if cfg.epochs == 0:
        return result

    x_all, y_all = stack(train_set)
    n = len(train_set)
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)

    best = -math.inf
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = poly_lr(epoch, cfg.schedule)
        state.lr = lr
        # the order depends only on (seed, epoch) so ablation variants see the same batches
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses.append(train_step(model, x_all[idx], y_all[idx], cfg, state, lr, drop_rng))
        train_loss = math.fsum(losses) / len(losses)
        val_d, val_j = quick_scores(model, val_set, cfg.eval_threshold)
        row = (str(epoch), format_lr(lr), f"{train_loss:.6f}", _fmt(val_d), _fmt(val_j))
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)
        result.history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_mdice": val_d, "val_miou": val_j})
        log.info("epoch %d lr %s loss %.4f val_mdice %s", epoch, format_lr(lr), train_loss, _fmt(val_d))

        state.epoch = epoch + 1
        score = val_d if val_set else -train_loss
        if score > best:
            best = score
            save_checkpoint(model, state, out / "best.ckpt")
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, state, out / f"epoch_{epoch + 1:04d}.ckpt")

    save_checkpoint(model, state, out / "final.ckpt")
    if test_set:
        result.test_report = evaluate_model(model, test_set, cfg.eval_threshold)
        result.test_report.write_csv(out / "test_metrics.csv")
    return result
