"""Pixel <-> patch-grid geometry.

A slide is represented only by its patch grid; these helpers map whole-slide
pixel coordinates onto grid cells for a given scan resolution and patch
stride, and give the pixel box of the classifier's context window around a
patch.
"""
from __future__ import annotations

import math

DEFAULT_RESOLUTION_UM_PER_PX = 0.25
DEFAULT_STRIDE_UM = 32.0
CONTEXT_WINDOW_UM = 911.0


def patch_size_px(resolution_um_per_px: float = DEFAULT_RESOLUTION_UM_PER_PX,
                  stride_um: float = DEFAULT_STRIDE_UM) -> float:
    if resolution_um_per_px <= 0 or stride_um <= 0:
        raise ValueError("resolution and stride must be positive")
    return stride_um / resolution_um_per_px


def pixel_to_patch(x_px: float, y_px: float,
                   resolution_um_per_px: float = DEFAULT_RESOLUTION_UM_PER_PX,
                   stride_um: float = DEFAULT_STRIDE_UM) -> tuple[int, int]:
    """Return the ``(row, col)`` of the patch containing pixel ``(x, y)``."""
    size = patch_size_px(resolution_um_per_px, stride_um)
    return int(math.floor(y_px / size)), int(math.floor(x_px / size))


def patch_to_pixel_box(row: int, col: int,
                       resolution_um_per_px: float = DEFAULT_RESOLUTION_UM_PER_PX,
                       stride_um: float = DEFAULT_STRIDE_UM) -> tuple[float, float, float, float]:
    """Pixel box ``(x0, y0, x1, y1)`` covered by a patch; half-open on the right."""
    size = patch_size_px(resolution_um_per_px, stride_um)
    return col * size, row * size, (col + 1) * size, (row + 1) * size


def patch_center_px(row: int, col: int,
                    resolution_um_per_px: float = DEFAULT_RESOLUTION_UM_PER_PX,
                    stride_um: float = DEFAULT_STRIDE_UM) -> tuple[float, float]:
    x0, y0, x1, y1 = patch_to_pixel_box(row, col, resolution_um_per_px, stride_um)
    return (x0 + x1) / 2, (y0 + y1) / 2


def context_window_px(row: int, col: int,
                      resolution_um_per_px: float = DEFAULT_RESOLUTION_UM_PER_PX,
                      stride_um: float = DEFAULT_STRIDE_UM,
                      window_um: float = CONTEXT_WINDOW_UM) -> tuple[float, float, float, float]:
    """Pixel box of the input window centred on a patch's assessed region."""
    cx, cy = patch_center_px(row, col, resolution_um_per_px, stride_um)
    half = window_um / resolution_um_per_px / 2
    return cx - half, cy - half, cx + half, cy + half


def index_to_rowcol(index: int, cols: int) -> tuple[int, int]:
    return divmod(index, cols)


def rowcol_to_index(row: int, col: int, cols: int) -> int:
    return row * cols + col
