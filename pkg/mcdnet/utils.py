"""
Shared utility functions for mcdnet
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(data: bytes) -> bool:
    """True when `data` opens with the PNG signature and holds at least a chunk header."""
    return len(data) >= 12 and data[:8] == PNG_MAGIC


def derive_seed(base: int, *keys: int) -> int:
    """Independent 32-bit seed for (base, keys...), stable across platforms."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])
    return int(ss.generate_state(1)[0])


def ensure_dir(path: Path | str) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _open_png(path: Path) -> Image.Image:
    try:
        with open(path, "rb") as fh:
            head = fh.read(16)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not is_png(head):
        raise DataError(f"{path} is not a PNG file")
    try:
        img = Image.open(path)
        img.load()
    except OSError as e:
        raise DataError(f"cannot decode {path}: {e}") from e
    return img


def read_rgb_png(path: Path | str) -> np.ndarray:
    """8-bit RGB PNG -> float32 [3,H,W] in [0,1]."""
    arr = np.asarray(_open_png(Path(path)).convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def read_mask_png(path: Path | str) -> np.ndarray:
    """8-bit gray PNG -> uint8 [H,W]; any nonzero pixel is moraine."""
    arr = np.asarray(_open_png(Path(path)).convert("L"), dtype=np.uint8)
    return (arr != 0).astype(np.uint8)


def to_bytes_image(image: np.ndarray) -> np.ndarray:
    """[3,H,W] in [0,1] -> uint8 [H,W,3]."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: Path | str, array: np.ndarray) -> Path:
    """Write a uint8 [H,W] or [H,W,3] array; output bytes depend only on the pixels."""
    path = Path(path)
    ensure_dir(path.parent)
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG", optimize=False)
    return path


def write_rgb_png(path: Path | str, image: np.ndarray) -> Path:
    return write_png(path, to_bytes_image(image))


def write_mask_png(path: Path | str, mask: np.ndarray) -> Path:
    """Binary mask written as {0, 255}."""
    return write_png(path, (np.asarray(mask) != 0).astype(np.uint8) * 255)
