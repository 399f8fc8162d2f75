"""Mask/image files, the binary weight container and dataset pairing."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

MAGIC = b"GNWT"
FORMAT_VERSION = 1
DTYPE_F64 = 1
DTYPE_BYTES = 2
CONFIG_ENTRY = "config"
MASK_SUFFIXES = (".png", ".pgm")


class WeightFormatError(ValueError):
    """Raised when a weight container is malformed."""


# ---------------------------------------------------------------------------
# masks and images


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    pos = 2
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([0-9]+)")
    for _ in range(3):
        m = token_re.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = tokens
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise ValueError(f"{path}: unsupported PGM header {w}x{h} maxval {maxval}")
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        dtype = np.dtype(">u2" if maxval > 255 else "u1")
        if len(raw) - pos < w * h * dtype.itemsize:
            raise ValueError(f"{path}: truncated PGM raster")
        data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    else:
        body = re.sub(rb"#[^\n]*", b"", raw[pos:]).split()
        if len(body) < w * h:
            raise ValueError(f"{path}: expected {w * h} PGM samples, found {len(body)}")
        data = np.array([int(v) for v in body[:w * h]])
    return data.reshape(h, w).astype(np.float64) / maxval


def _pil_gray(img: Image.Image) -> np.ndarray:
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        return arr / (65535.0 if img.mode.startswith("I;16") else max(arr.max(), 1.0))
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    if img.mode == "LA":
        return np.asarray(img, dtype=np.float64)[..., 0] / 255.0
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]) / 255.0


def load_mask(path) -> np.ndarray:
    """Read a grayscale PNG or PGM (P2/P5) as a float array in [0, 1].

    Colour PNGs are reduced to luma 0.299 R + 0.587 G + 0.114 B.
    """
    path = Path(path)
    try:
        if path.suffix.lower() == ".pgm":
            return _read_pgm(path)
        with Image.open(path) as img:
            return _pil_gray(img)
    except FileNotFoundError:
        raise FileNotFoundError(f"mask file not found: {path}") from None
    except (OSError, ValueError) as exc:
        if isinstance(exc, ValueError) and str(path) in str(exc):
            raise
        raise ValueError(f"cannot read mask {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """Read an image as a (3, h, w) float RGB array in [0, 1]; gray inputs are replicated."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        g = load_mask(path)
        return np.stack([g, g, g])
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise FileNotFoundError(f"image file not found: {path}") from None
    except OSError as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    return rgb.transpose(2, 0, 1).copy()


def save_mask(img: np.ndarray, path) -> None:
    """Write a [0, 1] map as 8-bit PNG or binary PGM (by suffix)."""
    path = Path(path)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("mask values must be finite and within [0, 1]")
    q = np.rint(img * 255.0).astype(np.uint8)
    suffix = path.suffix.lower()
    try:
        if suffix == ".pgm":
            h, w = q.shape
            path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
        elif suffix == ".png":
            Image.fromarray(q, mode="L").save(path)
        else:
            raise ValueError(f"unsupported mask format {suffix!r} for {path}; use .png or .pgm")
    except OSError as exc:
        raise OSError(f"cannot write mask {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# weight container
#
# magic "GNWT" | u32 version | u32 entry count | entries
# entry: u16 name length | name (UTF-8) | u8 dtype | u8 ndim | u32 dims... | payload
# dtype 1: little-endian float64; dtype 2: raw bytes (used for the JSON config)


def encode_weights(arrays: Mapping[str, np.ndarray], config: Mapping | None = None) -> bytes:
    parts = []
    entries = []
    if config is not None:
        blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries.append((CONFIG_ENTRY, DTYPE_BYTES, np.frombuffer(blob, dtype=np.uint8)))
    for name in sorted(arrays):
        if name == CONFIG_ENTRY:
            raise WeightFormatError(f"parameter name {CONFIG_ENTRY!r} is reserved")
        entries.append((name, DTYPE_F64, np.asarray(arrays[name], dtype=np.float64)))
    parts.append(MAGIC + struct.pack("<II", FORMAT_VERSION, len(entries)))
    for name, dtype, arr in entries:
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightFormatError(f"entry {name!r} too large to encode")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", dtype, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.astype("<f8") if dtype == DTYPE_F64 else arr.astype(np.uint8)
        parts.append(payload.tobytes(order="C"))
    return b"".join(parts)


def decode_weights(raw: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict | None]:
    """Parse a container; returns (arrays, config or None)."""
    view = memoryview(raw)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"{source}: truncated while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise WeightFormatError(f"{source}: bad magic, not a weight container")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{source}: unsupported format version {version}")
    arrays: dict[str, np.ndarray] = {}
    config = None
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "entry name length"))
        name = bytes(take(name_len, "entry name")).decode("utf-8")
        dtype, ndim = struct.unpack("<BB", take(2, f"entry {name!r} header"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"entry {name!r} dims"))
        size = int(np.prod(dims)) if ndim else 1
        if name in arrays or (name == CONFIG_ENTRY and config is not None):
            raise WeightFormatError(f"{source}: duplicate entry {name!r}")
        if dtype == DTYPE_F64:
            arr = np.frombuffer(bytes(take(8 * size, f"entry {name!r} payload")), dtype="<f8")
            arrays[name] = arr.astype(np.float64).reshape(dims)
        elif dtype == DTYPE_BYTES:
            blob = bytes(take(size, f"entry {name!r} payload"))
            if name != CONFIG_ENTRY:
                raise WeightFormatError(f"{source}: byte entry {name!r} is not the config blob")
            config = json.loads(blob.decode("utf-8"))
        else:
            raise WeightFormatError(f"{source}: entry {name!r} has unknown dtype code {dtype}")
    if pos != len(view):
        raise WeightFormatError(f"{source}: {len(view) - pos} trailing bytes after last entry")
    return arrays, config


def save_weights(arrays: Mapping[str, np.ndarray], path, config: Mapping | None = None) -> None:
    data = encode_weights(arrays, config)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write weights to {path}: {exc}") from exc


def load_weights(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"weight file not found: {path}") from None
    return decode_weights(raw, str(path))


# ---------------------------------------------------------------------------
# dataset pairing


@dataclass
class Pairing:
    pairs: list[tuple[str, Path, Path]]
    unmatched_pred: list[str] = field(default_factory=list)
    unmatched_gt: list[str] = field(default_factory=list)

    @property
    def unmatched(self) -> list[str]:
        return sorted(set(self.unmatched_pred) | set(self.unmatched_gt))


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise NotADirectoryError(f"not a directory: {directory}")
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in MASK_SUFFIXES:
            if p.stem in found:
                raise ValueError(f"{directory}: stem {p.stem!r} appears twice ({found[p.stem].name}, {p.name})")
            found[p.stem] = p
    return found


def pair_dataset(pred_dir, gt_dir) -> Pairing:
    """Match prediction and ground-truth files by stem, sorted lexicographically."""
    preds = _stems(Path(pred_dir))
    gts = _stems(Path(gt_dir))
    common = sorted(set(preds) & set(gts))
    if not common:
        raise ValueError(f"no matching file stems between {pred_dir} and {gt_dir}")
    return Pairing(
        [(s, preds[s], gts[s]) for s in common],
        sorted(set(preds) - set(gts)),
        sorted(set(gts) - set(preds)),
    )
