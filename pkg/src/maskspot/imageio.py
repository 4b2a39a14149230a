"""Grayscale image files: binary PGM (P5) natively, PNG through Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """``img`` in [0, 1], shape [H, W]."""
    data = to_uint8(img)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported")
    pos += 1
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / 255.0


def read_image(path: str | Path) -> np.ndarray:
    """Grayscale [H, W] array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="L").save(path)


def write_gray(path: str | Path, img: np.ndarray) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, img)
    else:
        write_pgm(path, img)
