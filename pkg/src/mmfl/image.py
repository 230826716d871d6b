"""Rasterise an instance into a cluster-index image and cut it into patches."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .instance import GtspInstance

DEFAULT_PATCH = 16
DEFAULT_ALPHA = 2.0


def ars_dims(n: int, w: int = DEFAULT_PATCH, alpha: float = DEFAULT_ALPHA) -> tuple[int, int]:
    """Side length ``ceil(alpha * sqrt(n) / w) * w`` (adaptive resolution scaling)."""
    if n < 1 or w < 1 or not alpha > 0:
        raise ValueError(f"ars_dims needs n >= 1, w >= 1, alpha > 0 (got n={n}, w={w}, alpha={alpha})")
    side = math.ceil(alpha * math.sqrt(n) / w) * w
    side = max(side, w)
    return side, side


@dataclass(frozen=True, eq=False)
class InstanceImage:
    pixels: np.ndarray  # (H, W) int64, indexed [y, x]
    patch_size: int
    m: int

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def at(self, x: int, y: int) -> int:
        return int(self.pixels[y, x])

    def normalized(self) -> np.ndarray:
        """Pixel values divided by ``m + 1`` so they lie in ``[0, 1)``."""
        return self.pixels / (self.m + 1.0)


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patches: np.ndarray  # (N, w*w), row-major within each patch
    patch_coords: np.ndarray  # (N, 2): (x0 / W, y0 / H)
    patch_size: int
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.patches)


def pixel_of(x: float, y: float, width: int, height: int) -> tuple[int, int]:
    return min(int(math.floor(x * width)), width - 1), min(int(math.floor(y * height)), height - 1)


def build_image(
    instance: GtspInstance,
    width: int | None = None,
    height: int | None = None,
    patch_size: int = DEFAULT_PATCH,
    alpha: float = DEFAULT_ALPHA,
) -> InstanceImage:
    """Single-channel image with ``cluster + 1`` at each node's pixel and 0 elsewhere.

    When two nodes land on the same pixel the higher node index wins.
    """
    if width is None:
        width, height = ars_dims(instance.n, patch_size, alpha)
    height = width if height is None else height
    if width != height or width % patch_size:
        raise ValueError(f"image must be square with side a multiple of {patch_size}, got {width}x{height}")
    pix = np.zeros((height, width), dtype=np.int64)
    for (x, y), c in zip(instance.coords.tolist(), instance.cluster_of.tolist()):
        px, py = pixel_of(x, y, width, height)
        pix[py, px] = c + 1
    pix.setflags(write=False)
    return InstanceImage(pix, patch_size, instance.m)


def extract_patches(image: InstanceImage, values: np.ndarray | None = None) -> PatchGrid:
    """Non-overlapping ``w x w`` blocks in row-major block order.

    ``values`` optionally replaces the raw pixels (e.g. the normalised image).
    """
    w = image.patch_size
    H, W = image.height, image.width
    src = image.pixels if values is None else values
    gh, gw = H // w, W // w
    blocks = src.reshape(gh, w, gw, w).transpose(0, 2, 1, 3).reshape(gh * gw, w * w)
    ys, xs = np.divmod(np.arange(gh * gw), gw)
    coords = np.stack([xs * w / W, ys * w / H], axis=1).astype(np.float64)
    return PatchGrid(blocks, coords, w, W, H)


def assemble_patches(grid: PatchGrid) -> np.ndarray:
    w = grid.patch_size
    gh, gw = grid.height // w, grid.width // w
    return grid.patches.reshape(gh, gw, w, w).transpose(0, 2, 1, 3).reshape(grid.height, grid.width)


def to_pgm(image: InstanceImage) -> str:
    """Plain (P2) PGM: ``P2``, ``W H``, ``maxval`` (= m), then one text row per pixel row."""
    lines = ["P2", f"{image.width} {image.height}", str(max(image.m, 1))]
    lines += [" ".join(str(v) for v in row) for row in image.pixels.tolist()]
    return "\n".join(lines) + "\n"


def write_pgm(image: InstanceImage, path) -> None:
    Path(path).write_text(to_pgm(image))
