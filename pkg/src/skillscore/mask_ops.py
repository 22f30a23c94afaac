"""Patch-ratio downsampling of binary tool masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    """Soft mask at patch resolution.

    ``grid[i, j]`` is the fraction of foreground pixels in the ``p x p``
    patch at row ``i``, column ``j`` of the source mask.
    """

    grid: np.ndarray
    patch_size: int
    source_shape: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def patchify(mask: np.ndarray, p: int) -> PatchGrid:
    """Downsample a binary ``h x w`` mask to an ``(h/p) x (w/p)`` ratio grid.

    Raises ValueError when ``p`` does not divide both dimensions.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    if p <= 0 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide mask shape {h}x{w}")
    binary = mask != 0
    counts = binary.reshape(h // p, p, w // p, p).sum(axis=(1, 3), dtype=np.int64)
    return PatchGrid(counts / float(p * p), p, (h, w))


def invert(grid: PatchGrid) -> PatchGrid:
    return PatchGrid(1.0 - grid.grid, grid.patch_size, grid.source_shape)
