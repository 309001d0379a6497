"""Flat ``key = value`` run configuration with dotted sections.

Example::

    # tiny run
    model.input_size = 96
    model.encoder_widths = 8, 16, 32, 64, 128
    train.epochs = 20
    data.synth.count = 250

Sections: ``model.*``, ``loss.*``, ``schedule.*``, ``train.*``, ``data.*``
and ``data.synth.*``. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig, coerce
from .optim import LRSchedule
from .synth import SynthParams

VARIANTS = ("full", "no_attention", "no_skips", "no_pretrain")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: LRSchedule = field(default_factory=LRSchedule)
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(synth=SynthParams()))
    batch_size: int = 8
    epochs: int = 150
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    eval_threshold: float = 0.5

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        self.schedule.validate()
        self.dataset.validate()
        if self.dataset.source == "synthetic":
            self.dataset.synth.validate()
        if self.dataset.resize_to != self.model.input_size:
            raise ConfigError(
                f"data.resize_to ({self.dataset.resize_to}) must equal model.input_size ({self.model.input_size})"
            )
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.batch_size >= 1, train.epochs >= 0 and train.checkpoint_every >= 0 required")
        if not 0.0 <= self.eval_threshold <= 1.0:
            raise ConfigError("train.eval_threshold must be in [0, 1]")
        return self


_TRAIN_KEYS = {"batch_size", "epochs", "seed", "output_dir", "checkpoint_every", "eval_threshold"}


def _set_field(obj, name: str, raw: str, where: str):
    known = {f.name for f in fields(obj)}
    if name not in known or name == "synth":
        raise ConfigError(f"{where}: unknown key")
    setattr(obj, name, coerce(raw, getattr(obj, name), where))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    cfg.dataset = DatasetSpec(synth=SynthParams())
    total_epochs_set = False
    resize_set = False
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, raw = (s.strip() for s in stripped.partition("="))
        where = f"{source}:{lineno}: {key}"
        section, _, name = key.partition(".")
        try:
            if section == "model":
                _set_field(cfg.model, name, raw, where)
                cfg.model.__post_init__()
            elif section == "loss":
                _set_field(cfg.loss, name, raw, where)
            elif section == "schedule":
                _set_field(cfg.schedule, name, raw, where)
                total_epochs_set |= name == "total_epochs"
            elif section == "train":
                if name not in _TRAIN_KEYS:
                    raise ConfigError(f"{where}: unknown key")
                setattr(cfg, name, coerce(raw, getattr(cfg, name), where))
            elif section == "data" and name.startswith("synth."):
                _set_field(cfg.dataset.synth, name[len("synth.") :], raw, where)
            elif section == "data":
                if name == "split":
                    try:
                        cfg.dataset.split = tuple(float(v) for v in raw.split(","))
                    except ValueError as exc:
                        raise ConfigError(f"{where}: bad split {raw!r}") from exc
                else:
                    _set_field(cfg.dataset, name, raw, where)
                    resize_set |= name == "resize_to"
            else:
                raise ConfigError(f"{where}: unknown section {section!r}")
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith(source) else f"{where}: {msg}") from None
    if not total_epochs_set and cfg.epochs > 0:
        cfg.schedule.total_epochs = cfg.epochs
    if not resize_set:
        cfg.dataset.resize_to = cfg.model.input_size
    return cfg.validate()


def load_config(path) -> RunConfig:
    # an unreadable file is an I/O error, not a configuration error
    return parse_config(Path(path).read_text(), str(path))


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Config delta for one ablation variant; only the documented flags change."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {VARIANTS}")
    model = replace(cfg.model)
    if variant == "no_attention":
        model.channel = False
        model.spatial = False
    elif variant == "no_skips":
        model.use_skips = False
    elif variant == "no_pretrain":
        model.encoder_checkpoint = ""
    return replace(cfg, model=model)
