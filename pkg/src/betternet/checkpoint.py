"""Binary checkpoint files.

Layout (little-endian)::

    b"BNETCKPT" | u32 version | u32 config length | config (UTF-8 key=value lines)
    repeated: u16 name length | name | u8 dtype tag | u8 rank | u32 dims[rank] | f64 data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError
from .model import Model, ModelConfig, build_model
from .optim import AdamState, TrainState

MAGIC = b"BNETCKPT"
VERSION = 1
DTYPE_F64 = 1


def _config_blob(m: Model, state: TrainState | None) -> bytes:
    lines = [f"model.{k}={v}" for k, v in m.config.to_items()]
    if state is not None:
        lines += [
            f"state.epoch={state.epoch}",
            f"state.step={state.step}",
            f"state.seed={state.seed}",
            f"state.lr={state.lr!r}",
        ]
        if state.adam is not None:
            a = state.adam
            lines += [f"adam.t={a.t}", f"adam.beta1={a.beta1!r}", f"adam.beta2={a.beta2!r}", f"adam.eps={a.eps!r}"]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(m: Model, state: TrainState | None, path) -> None:
    blob = _config_blob(m, state)
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, arr in m.state_arrays().items():
        parts.append(_record(name, arr))
    if state is not None and state.adam is not None:
        for name in sorted(state.adam.m):
            parts.append(_record(f"adam_m:{name}", state.adam.m[name]))
            parts.append(_record(f"adam_v:{name}", state.adam.v[name]))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse and verify a checkpoint; returns (config key/values, named arrays)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12:
        raise IntegrityError(f"{path}: file too short ({len(data)} bytes) to be a checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        hint = "" if body.startswith(MAGIC) else " (magic bytes also wrong)"
        raise IntegrityError(f"{path}: CRC32 mismatch, file is truncated or corrupted{hint}")
    if body[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint, magic {body[:8]!r} != {MAGIC!r}")
    version, clen = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint format version {version} unsupported (expected {VERSION})")
    off = 16
    try:
        text = body[off : off + clen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IntegrityError(f"{path}: config block is not UTF-8") from exc
    off += clen
    config = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    arrays = {}
    try:
        while off < len(body):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", body, off)
            off += 2
            if tag != DTYPE_F64:
                raise FormatError(f"{path}: unknown dtype tag {tag} for {name}")
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = off + 8 * count
            if end > len(body):
                raise IntegrityError(f"{path}: record {name} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
            off = end
    except struct.error as exc:
        raise IntegrityError(f"{path}: truncated record at byte {off}") from exc
    return config, arrays


def _model_config(config: dict) -> ModelConfig:
    items = {k[len("model.") :]: v for k, v in config.items() if k.startswith("model.")}
    # the warm-start path is only meaningful when the model is first built
    items.pop("encoder_checkpoint", None)
    return ModelConfig.from_items(items)


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Model, TrainState]:
    config, arrays = read_checkpoint(path)
    cfg = _model_config(config)
    if expected is not None and expected.architecture() != cfg.architecture():
        diff = sorted(k for k, v in expected.architecture().items() if cfg.architecture().get(k) != v)
        raise ConfigError(f"{path}: checkpoint architecture differs from expected config in {diff}")
    model = build_model(cfg)
    model.load_arrays({k: v for k, v in arrays.items() if k.startswith(("param:", "buffer:"))})
    state = TrainState(
        epoch=int(config.get("state.epoch", 0)),
        step=int(config.get("state.step", 0)),
        seed=int(config.get("state.seed", cfg.seed)),
        lr=float(config.get("state.lr", 0.0)),
    )
    if "adam.t" in config:
        adam = AdamState(
            t=int(config["adam.t"]),
            beta1=float(config["adam.beta1"]),
            beta2=float(config["adam.beta2"]),
            eps=float(config["adam.eps"]),
        )
        for key, arr in arrays.items():
            if key.startswith("adam_m:"):
                adam.m[key[7:]] = arr.copy()
            elif key.startswith("adam_v:"):
                adam.v[key[7:]] = arr.copy()
        state.adam = adam
    return model, state


def load_encoder(model: Model, path) -> int:
    """Warm-start the encoder from any checkpoint with matching encoder shapes."""
    _, arrays = read_checkpoint(path)
    wanted = {k: v for k, v in arrays.items() if k.split(":", 1)[-1].startswith("encoder.")}
    if not wanted:
        raise ConfigError(f"{path}: checkpoint holds no encoder parameters")
    return model.load_arrays(wanted, prefix="encoder.")
