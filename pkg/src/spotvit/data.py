"""Desk-scale synthetic image classification data.

The positioned-shape generator places one class-specific glyph on a noisy
background at a random grid-aligned position, so the discriminative signal
occupies a small, known minority of patches and pruning has headroom. The
"noise" generator produces pure-noise controls.

File format: magic "SPOTDS1", then per record a little-endian uint16 label
followed by the raw float64 pixel rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError

MAGIC = b"SPOTDS1"

GENERATORS = ("shapes", "noise")


@dataclass
class SyntheticDatasetSpec:
    image_size: int = 64
    classes: int = 4
    samples: int = 256
    generator: str = "shapes"
    noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError(f"noise level must lie in [0, 1), got {self.noise}")
        if self.classes < 2 or self.classes > 8:
            raise ConfigError(f"classes must lie in [2, 8], got {self.classes}")


def _glyphs(size: int) -> np.ndarray:
    """Eight distinct binary patterns, one per possible class."""
    g = np.zeros((8, size, size), dtype=bool)
    t = max(size // 5, 2)  # stroke thickness
    g[0, :, :] = True  # filled square
    g[1, :t, :] = g[1, -t:, :] = g[1, :, :t] = g[1, :, -t:] = True  # hollow square
    idx = np.arange(size)
    for off in range(-t // 2, t - t // 2):  # X
        d = np.clip(idx + off, 0, size - 1)
        g[2, idx, d] = True
        g[2, idx, size - 1 - d] = True
    mid = size // 2
    g[3, mid - t // 2 : mid + (t + 1) // 2, :] = True  # plus
    g[3, :, mid - t // 2 : mid + (t + 1) // 2] = True
    g[4, ::2, :] = True  # horizontal stripes
    g[5, :, ::2] = True  # vertical stripes
    block = max(size // 4, 1)
    checker = (idx[:, None] // block + idx[None, :] // block) % 2 == 0
    g[6] = checker
    for off in range(t):  # single diagonal band
        d = np.clip(idx + off, 0, size - 1)
        g[7, idx, d] = True
    return g


def generate(spec: SyntheticDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Images (S, H, W, 1) in [0, 1] and integer labels (S,)."""
    rng = np.random.default_rng(spec.seed)
    h = spec.image_size
    glyph_px = h // 4  # spans a 2x2 patch block for the default desk model
    glyphs = _glyphs(glyph_px)
    step = max(glyph_px // 2, 1)
    positions = np.arange(0, h - glyph_px + 1, step)

    images = np.empty((spec.samples, h, h, 1))
    labels = rng.integers(0, spec.classes, size=spec.samples)
    for i in range(spec.samples):
        img = rng.uniform(0.0, spec.noise, size=(h, h))
        if spec.generator == "shapes":
            top = int(rng.choice(positions))
            left = int(rng.choice(positions))
            intensity = 0.75 + 0.25 * rng.random()
            glyph = glyphs[labels[i]]
            region = img[top : top + glyph_px, left : left + glyph_px]
            img[top : top + glyph_px, left : left + glyph_px] = np.where(
                glyph, intensity, region
            )
        images[i, :, :, 0] = img
    return images, labels.astype(np.int64)


def save_dataset(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for img, label in zip(images, labels):
            fh.write(struct.pack("<H", int(label)))
            fh.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def load_dataset(
    path: str | Path, image_size: int, channels: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a dataset file")
    pixels = image_size * image_size * channels
    record = 2 + 8 * pixels
    body = blob[len(MAGIC) :]
    if len(body) % record != 0:
        raise CheckpointError(f"{path}: truncated record (not a multiple of {record})")
    count = len(body) // record
    images = np.empty((count, image_size, image_size, channels))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        off = i * record
        (labels[i],) = struct.unpack_from("<H", body, off)
        images[i] = np.frombuffer(
            body[off + 2 : off + record], dtype="<f8"
        ).reshape(image_size, image_size, channels)
    return images, labels
