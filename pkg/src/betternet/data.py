"""Image/mask ingestion, preprocessing, splits and post-processing.

Images are binary PPM (P6) and masks binary PGM (P5), both with maxval 255,
stored as ``root/images/<name>.ppm`` and ``root/masks/<name>.pgm``.
Arrays are float64: images ``(3, H, W)`` in [0, 1], masks ``(H, W)`` in {0, 1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, IntegrityError
from .tensor import _bilinear_matrix


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray
    source: str = ""


# ---------------------------------------------------------------- netpbm


def _read_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise IntegrityError(f"{path}: header ends unexpectedly at byte {start}")
    return buf[start:pos], pos


def read_netpbm(path) -> np.ndarray:
    """Raw uint8 pixels: (H, W, 3) for P6, (H, W) for P5."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0 (expected P6 or P5)")
    pos = 2
    values = []
    for field_name in ("width", "height", "maxval"):
        tok_start = pos
        tok, pos = _read_token(buf, pos, path)
        try:
            values.append(int(tok))
        except ValueError as exc:
            raise FormatError(f"{path}: {field_name} {tok!r} is not an integer (byte {tok_start})") from exc
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (byte {pos}); only 255 is accepted")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: non-positive size {width}x{height}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise IntegrityError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise IntegrityError(f"{path}: payload truncated at byte {len(buf)}, expected {need} bytes from byte {pos}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, channels) if channels == 3 else pixels.reshape(height, width)


def write_netpbm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write array of shape {pixels.shape} as netpbm")
    h, w = pixels.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes())


def to_bytes(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    raw = read_netpbm(path)
    if raw.ndim != 3:
        raise FormatError(f"{path}: expected a P6 colour image")
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_gray(path) -> np.ndarray:
    raw = read_netpbm(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a P5 grey image")
    return raw.astype(np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    """Grey PGM binarised at 128/255."""
    raw = read_netpbm(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a P5 mask")
    return (raw >= 128).astype(np.float64)


def save_image(path, image: np.ndarray) -> None:
    write_netpbm(path, to_bytes(np.asarray(image).transpose(1, 2, 0)))


def save_gray(path, gray: np.ndarray) -> None:
    write_netpbm(path, to_bytes(gray))


# ---------------------------------------------------------------- preprocessing


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel bilinear resize of an (H, W) or (C, H, W) array."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    mh = _bilinear_matrix(h, out_h)
    mw = _bilinear_matrix(w, out_w)
    return np.einsum("ih,...hw,jw->...ij", mh, x, mw)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return binarize(resize_bilinear(mask, out_h, out_w), 0.5)


def binarize(x, threshold: float = 0.5) -> np.ndarray:
    """1 where ``x > threshold`` (strict), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return (np.asarray(x) > threshold).astype(np.float64)


def split_shuffle(items: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Seeded permutation cut into train/val/test.

    Validation and test sizes are ``floor(fraction * n)``; the remainder goes
    to training.
    """
    items = list(items)
    if not items:
        raise ValueError("split_shuffle needs a non-empty list")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    pick = lambda idx: [items[i] for i in idx]
    return {
        "train": pick(order[:n_train]),
        "val": pick(order[n_train : n_train + n_val]),
        "test": pick(order[n_train + n_val :]),
    }


# ---------------------------------------------------------------- morphology


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= r * r


def morphological(x_bin, op: str, radius: int) -> np.ndarray:
    """Binary opening or closing with a disk.

    Erosion treats the outside of the image as foreground and dilation as
    background, which makes the pair adjoint: both operators are idempotent
    and ``open(x) <= x <= close(x)``.
    """
    if radius < 1:
        raise ValueError("morphology radius must be >= 1")
    x = np.asarray(x_bin)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("morphological expects a binary map")
    x = x.astype(bool)
    se = disk(radius)
    erode = lambda a: ndimage.binary_erosion(a, structure=se, border_value=1)
    dilate = lambda a: ndimage.binary_dilation(a, structure=se, border_value=0)
    if op == "open":
        out = dilate(erode(x))
    elif op == "close":
        out = erode(dilate(x))
    else:
        raise ValueError(f"unknown morphological op {op!r}")
    return out.astype(np.float64)


def parse_morph(spec: Optional[str]) -> Optional[tuple[str, int]]:
    """``"open:2"`` -> ("open", 2); None/"none" -> None."""
    if not spec or spec == "none":
        return None
    op, _, r = spec.partition(":")
    if op not in ("open", "close") or not r.isdigit():
        raise ConfigError(f"morph must look like open:R or close:R, got {spec!r}")
    return op, int(r)


# ---------------------------------------------------------------- folders


def list_folder(root) -> list[tuple[Path, Path]]:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root}: expected images/ and masks/ subfolders")
    images = {p.stem: p for p in img_dir.glob("*.ppm")}
    masks = {p.stem: p for p in mask_dir.glob("*.pgm")}
    if images.keys() != masks.keys():
        missing = sorted(images.keys() ^ masks.keys())
        raise FileNotFoundError(f"{root}: unmatched image/mask basenames {missing[:5]}")
    return [(images[k], masks[k]) for k in sorted(images)]


def load_folder(root, resize_to: Optional[int] = None) -> list[SamplePair]:
    out = []
    for img_path, mask_path in list_folder(root):
        img, mask = load_image(img_path), load_mask(mask_path)
        if resize_to and img.shape[1:] != (resize_to, resize_to):
            img = resize_bilinear(img, resize_to, resize_to)
        if resize_to and mask.shape != (resize_to, resize_to):
            mask = resize_mask(mask, resize_to, resize_to)
        out.append(SamplePair(img, mask, img_path.stem))
    return out


def write_folder(root, pairs: Sequence[SamplePair]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        save_image(root / "images" / f"{p.source}.ppm", p.image)
        save_gray(root / "masks" / f"{p.source}.pgm", p.mask)


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # or "folder"
    root: str = ""
    resize_to: int = 224
    split: tuple = (0.8, 0.1, 0.1)
    shuffle_seed: int = 0
    synth: "object" = field(default=None)

    def validate(self) -> "DatasetSpec":
        if self.source not in ("synthetic", "folder"):
            raise ConfigError(f"data.source must be synthetic or folder, got {self.source!r}")
        if self.source == "folder" and not self.root:
            raise ConfigError("data.root is required for folder datasets")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError(f"data.split must be three fractions summing to 1, got {self.split}")
        return self


def load_dataset(spec: DatasetSpec) -> dict:
    """Materialise a dataset and split it into train/val/test lists of SamplePair."""
    spec.validate()
    if spec.source == "folder":
        pairs = load_folder(spec.root, spec.resize_to)
    else:
        from .synth import synth_generate

        pairs = synth_generate(spec.synth)
        if spec.resize_to and pairs and pairs[0].mask.shape != (spec.resize_to, spec.resize_to):
            pairs = [
                SamplePair(resize_bilinear(p.image, spec.resize_to, spec.resize_to), resize_mask(p.mask, spec.resize_to, spec.resize_to), p.source)
                for p in pairs
            ]
    return split_shuffle(pairs, spec.split, spec.shuffle_seed)
