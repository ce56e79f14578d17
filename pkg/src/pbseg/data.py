"""Synthetic aerial-style scenes and portable PGM/PPM raster I/O.

Scene recipe (all shapes snapped to a 4-pixel grid, the model's output
stride; sizes and positions below are in grid cells):

1. ``rng = numpy.random.default_rng(seed)``; raster starts as class 0.
2. Buildings: ``n = rng.integers(2, 6)``; per building draw height, width
   ``rng.integers(2, 6)`` each, then top ``rng.integers(0, gh - hh + 1)``
   and left ``rng.integers(0, gw - ww + 1)``.
3. Roads: ``n = rng.integers(1, 3)``; per road draw thickness
   ``rng.integers(1, 3)`` and top ``rng.integers(0, gh - t + 1)``; the band
   spans the full width.
4. Vehicles: ``n = rng.integers(3, 9)``; per vehicle draw an orientation
   ``rng.integers(0, 2)`` (0: 1x2 cells, 1: 2x1), then top and left as
   for buildings.
5. Family classes: building, road, vehicle map to ``1 + (k mod (C-1))`` for
   ``k = 0, 1, 2``. Later shapes overwrite earlier ones.
6. ``image = palette[label] + rng.normal(0, 0.05, (H, W, 3))`` clipped to
   [0, 1] and stored channel-first.

Grid extents ``gh, gw`` are ``H // 4, W // 4``; boxes are clipped to them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CELL = 4
NOISE_STD = 0.05

PALETTE = np.array(
    [
        [0.10, 0.45, 0.15],  # background vegetation
        [0.80, 0.25, 0.20],  # building
        [0.55, 0.55, 0.55],  # road
        [0.15, 0.30, 0.90],  # vehicle
        [0.95, 0.85, 0.20],
        [0.60, 0.20, 0.70],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.75],
    ]
)


def palette(num_classes: int) -> np.ndarray:
    if num_classes <= len(PALETTE):
        return PALETTE[:num_classes]
    extra = np.random.default_rng(12345).uniform(0.0, 1.0, size=(num_classes - len(PALETTE), 3))
    return np.concatenate([PALETTE, extra])


@dataclass
class SceneSample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    label_raster: np.ndarray  # H x W ints in [0, C)
    seed: int
    num_classes: int

    def masks(self) -> np.ndarray:
        """``C x H x W`` boolean masks partitioning the raster."""
        return self.label_raster[None] == np.arange(self.num_classes)[:, None, None]


def family_class(family: int, num_classes: int) -> int:
    return 1 + family % (num_classes - 1)


def generate_scene(seed: int, height: int = 64, width: int = 64, num_classes: int = 4, shapes: bool = True) -> SceneSample:
    if height < 8 or width < 8:
        raise ValueError(f"scene size {height}x{width} too small (need at least 8x8)")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    gh, gw = height // CELL, width // CELL
    label = np.zeros((height, width), dtype=np.int64)

    def fill(top, left, hh, ww, cls):
        label[top * CELL : (top + hh) * CELL, left * CELL : (left + ww) * CELL] = cls

    if shapes:
        cls = family_class(0, num_classes)
        for _ in range(rng.integers(2, 6)):
            hh, ww = min(int(rng.integers(2, 6)), gh), min(int(rng.integers(2, 6)), gw)
            fill(rng.integers(0, gh - hh + 1), rng.integers(0, gw - ww + 1), hh, ww, cls)
        cls = family_class(1, num_classes)
        for _ in range(rng.integers(1, 3)):
            t = min(int(rng.integers(1, 3)), gh)
            fill(rng.integers(0, gh - t + 1), 0, t, gw, cls)
        cls = family_class(2, num_classes)
        for _ in range(rng.integers(3, 9)):
            hh, ww = (1, 2) if rng.integers(0, 2) == 0 else (2, 1)
            fill(rng.integers(0, gh - hh + 1), rng.integers(0, gw - ww + 1), hh, ww, cls)

    colors = palette(num_classes)[label]
    image = np.clip(colors + rng.normal(0.0, NOISE_STD, size=colors.shape), 0.0, 1.0)
    return SceneSample(image.transpose(2, 0, 1).copy(), label, seed, num_classes)


def downsample_labels(raster: np.ndarray, factor: int = CELL) -> np.ndarray:
    """Majority label of each ``factor x factor`` block (lowest class on ties)."""
    h, w = raster.shape
    blocks = raster[: h - h % factor, : w - w % factor].reshape(h // factor, factor, w // factor, factor)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(h // factor, w // factor, -1)
    n = int(raster.max()) + 1
    counts = (blocks[..., None] == np.arange(n)).sum(axis=2)
    return counts.argmax(axis=-1)


# --------------------------------------------------------------------------
# PGM / PPM
# --------------------------------------------------------------------------

class RasterFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _parse_header(buf: bytes, magic: bytes) -> tuple[list[int], int]:
    if buf[:2] != magic:
        raise RasterFormatError(f"expected magic {magic.decode()}, found {buf[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        start = pos
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= len(buf):
            raise RasterFormatError("header ended early", pos)
        if pos == start:
            raise RasterFormatError("expected whitespace in header", pos)
        tok_start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise RasterFormatError("expected a decimal integer in header", pos)
        fields.append(int(buf[tok_start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise RasterFormatError("expected a single whitespace byte after maxval", pos)
    return fields, pos + 1


def _read_binary(path: str | os.PathLike, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (width, height, maxval), start = _parse_header(buf, magic)
    if width <= 0 or height <= 0:
        raise RasterFormatError(f"non-positive size {width}x{height}", 2)
    if maxval > 255 or maxval <= 0:
        raise RasterFormatError(f"unsupported maxval {maxval}; only 8-bit rasters are supported", start - 1)
    need = width * height * channels
    payload = buf[start : start + need]
    if len(payload) < need:
        raise RasterFormatError(f"payload truncated: {len(payload)} of {need} bytes", start + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr[..., 0] if channels == 1 else arr


def write_mask_raster(raster: np.ndarray, path: str | os.PathLike) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"raster must be 2-D, got shape {raster.shape}")
    if raster.size and (raster.min() < 0 or raster.max() > 255):
        raise ValueError("class values must lie in [0, 255]")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.astype(np.uint8).tobytes())


def read_mask_raster(path: str | os.PathLike) -> np.ndarray:
    return _read_binary(path, b"P5", 1).astype(np.int64)


def write_ppm(image: np.ndarray, path: str | os.PathLike) -> None:
    """Write an ``H x W x 3`` uint8 (or [0,1] float) image as binary P6."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    return _read_binary(path, b"P6", 3)


def colorize(raster: np.ndarray, num_classes: int) -> np.ndarray:
    return palette(num_classes)[raster]


def overlay(image: np.ndarray, raster: np.ndarray, num_classes: int, alpha: float = 0.5) -> np.ndarray:
    """Blend a channel-first image with the palette colours of ``raster``."""
    return (1.0 - alpha) * image.transpose(1, 2, 0) + alpha * colorize(raster, num_classes)
