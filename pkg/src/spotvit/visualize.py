"""Mask overlays as binary portable pixmaps (P6).

Patches pruned earlier are shaded darker: the patch region is multiplied by
the shade level of its pruning stage (0.25/0.5/0.75 by default), retained
patches stay at full brightness. All pixel math is integer after one initial
rounding, so output bytes are stable across platforms.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ContractError(f"write_ppm expects (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def mask_overlay(
    image: np.ndarray,
    stage_masks: list[np.ndarray],
    patch_size: int,
    shade_levels: list[float],
) -> np.ndarray:
    """Shade each patch by the stage at which it was pruned.

    stage_masks are hierarchical keep masks over [class] + patches; the shade
    for a patch comes from the first stage that dropped it.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[:, :, 0] if image.shape[2] == 1 else image.mean(axis=2)
    h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ContractError(f"image {image.shape} not divisible by patch size {patch_size}")
    grid_w = w // patch_size
    n_patches = (h // patch_size) * grid_w
    for k, m in enumerate(stage_masks, start=1):
        if np.asarray(m).shape != (n_patches + 1,):
            raise ContractError(
                f"stage {k} mask has {np.asarray(m).shape[0]} entries, "
                f"expected {n_patches + 1} for this patch grid"
            )

    base = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.int64)
    shaded = np.repeat(base[:, :, None], 3, axis=2)
    for patch in range(n_patches):
        stage = None
        for k, mask in enumerate(stage_masks):
            if not mask[1 + patch]:
                stage = k
                break
        if stage is None:
            continue
        shade = shade_levels[min(stage, len(shade_levels) - 1)]
        row = (patch // grid_w) * patch_size
        col = (patch % grid_w) * patch_size
        block = shaded[row : row + patch_size, col : col + patch_size]
        shaded[row : row + patch_size, col : col + patch_size] = np.floor(
            block * shade
        ).astype(np.int64)
    return shaded.astype(np.uint8)
