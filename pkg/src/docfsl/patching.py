"""Overlapping square patch grids over document images.

Per axis the grid holds ``round(2 * dim / W)`` patches (nominal 50% overlap),
evenly spaced so the first starts at 0 and the last ends flush with the image.
Images smaller than a patch along an axis are reflect-padded symmetrically.
All rounding is integer arithmetic, half away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _round_div(p: int, q: int) -> int:
    """round(p / q) half away from zero, for p >= 0 and q > 0."""
    return (2 * p + q) // (2 * q)


@dataclass(frozen=True)
class GridPlan:
    patch_size: int
    row_starts: tuple[int, ...]
    col_starts: tuple[int, ...]
    image_height: int
    image_width: int
    pad_top: int = 0
    pad_left: int = 0
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def padded_height(self) -> int:
        return self.image_height + self.pad_top + self.pad_bottom

    @property
    def padded_width(self) -> int:
        return self.image_width + self.pad_left + self.pad_right

    @property
    def n_patches(self) -> int:
        return len(self.row_starts) * len(self.col_starts)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.row_starts), len(self.col_starts)

    def positions(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_starts for c in self.col_starts]

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "row_starts": list(self.row_starts),
            "col_starts": list(self.col_starts),
            "image_height": self.image_height,
            "image_width": self.image_width,
            "pad_top": self.pad_top,
            "pad_left": self.pad_left,
            "pad_bottom": self.pad_bottom,
            "pad_right": self.pad_right,
        }


@dataclass(frozen=True, eq=False)
class PatchSequence:
    """Patches stacked as a (T, W, W, 3) uint8 array in row-major raster order."""

    patches: np.ndarray
    positions: tuple[tuple[int, int], ...]
    source_id: str = ""

    def __len__(self):
        return len(self.positions)


def _axis_plan(dim: int, W: int) -> tuple[tuple[int, ...], int, int]:
    if dim <= W:
        pad = W - dim
        return (0,), pad // 2, pad - pad // 2
    # dim > W gives count >= 2; capping at dim - W + 1 keeps rounded starts distinct
    count = min(max(1, _round_div(2 * dim, W)), dim - W + 1)
    span = dim - W
    starts = tuple(_round_div(i * span, count - 1) for i in range(count))
    return starts, 0, 0


def plan_grid(height: int, width: int, patch_size: int) -> GridPlan:
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if height < 1 or width < 1:
        raise ValueError(f"image dimensions must be >= 1, got {height}x{width}")
    rows, pt, pb = _axis_plan(int(height), int(patch_size))
    cols, pl, pr = _axis_plan(int(width), int(patch_size))
    return GridPlan(int(patch_size), rows, cols, int(height), int(width), pt, pl, pb, pr)


def _bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping, float64 output."""
    in_h, in_w = image.shape[:2]
    img = image.astype(np.float64)

    def coords(n_out, n_in):
        x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1)
        x0 = np.floor(x).astype(np.intp)
        x1 = np.minimum(x0 + 1, n_in - 1)
        return x0, x1, x - x0

    y0, y1, wy = coords(out_h, in_h)
    x0, x1, wx = coords(out_w, in_w)
    wx = wx[None, :, None] if img.ndim == 3 else wx[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    wy = wy[:, None, None] if img.ndim == 3 else wy[:, None]
    return top * (1 - wy) + bot * wy


def resize_to_reference(image: np.ndarray, ref_height: int, ref_width: int) -> np.ndarray:
    """Bilinear resize to exactly ``(ref_height, ref_width)``, keeping dtype uint8."""
    if image.size == 0:
        raise ValueError("cannot resize an empty image")
    if ref_height < 1 or ref_width < 1:
        raise ValueError(f"reference size must be >= 1, got {ref_height}x{ref_width}")
    if image.shape[:2] == (ref_height, ref_width):
        return image.copy()
    out = _bilinear(image, ref_height, ref_width)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def pad_image(image: np.ndarray, plan: GridPlan) -> np.ndarray:
    if not (plan.pad_top or plan.pad_bottom or plan.pad_left or plan.pad_right):
        return image
    widths = [(plan.pad_top, plan.pad_bottom), (plan.pad_left, plan.pad_right)]
    widths += [(0, 0)] * (image.ndim - 2)
    return np.pad(image, widths, mode="reflect")


def extract_patches(image: np.ndarray, plan: GridPlan, source_id: str = "") -> PatchSequence:
    if image.shape[:2] != (plan.image_height, plan.image_width):
        raise ValueError(
            f"plan was made for {plan.image_height}x{plan.image_width}, image is {image.shape[0]}x{image.shape[1]}"
        )
    padded = pad_image(image, plan)
    W = plan.patch_size
    positions = tuple(plan.positions())
    patches = np.stack([padded[r:r + W, c:c + W] for r, c in positions])
    return PatchSequence(patches, positions, source_id)


def stitch_patches(seq: PatchSequence, plan: GridPlan) -> np.ndarray:
    """Paste patches back at their positions (later patches overwrite earlier)."""
    W = plan.patch_size
    out = np.zeros((plan.padded_height, plan.padded_width) + seq.patches.shape[3:], dtype=seq.patches.dtype)
    for patch, (r, c) in zip(seq.patches, seq.positions):
        out[r:r + W, c:c + W] = patch
    return out


def document_patches(image: np.ndarray, patch_size: int, rescale: bool = True,
                     ref_size: tuple[int, int] = (1047, 1564), source_id: str = "") -> tuple[PatchSequence, GridPlan]:
    """Optional resize to the reference shape, then plan and cut the grid."""
    if rescale:
        image = resize_to_reference(image, *ref_size)
    plan = plan_grid(image.shape[0], image.shape[1], patch_size)
    return extract_patches(image, plan, source_id), plan
