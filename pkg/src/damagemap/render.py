"""Class maps to inspection images.

Plain 8-bit RGB rasters, one pixel per cell, with the fixed legend palette:
background #eacfb8, intact #3976af, damaged #c73a31, invalid #000000. No
georeferencing is embedded; these exist for eyeballing and documentation.
"""

from __future__ import annotations

import io

import numpy as np

from .errors import DataError
from .raster import CLASS_DAMAGED, CLASS_INTACT, CLASS_INVALID, ClassMap
from .util import atomic_write_bytes

PALETTE: dict[int, tuple[int, int, int]] = {
    0: (0xEA, 0xCF, 0xB8),
    CLASS_INTACT: (0x39, 0x76, 0xAF),
    CLASS_DAMAGED: (0xC7, 0x3A, 0x31),
    CLASS_INVALID: (0x00, 0x00, 0x00),
}


def classmap_to_rgb(classmap) -> np.ndarray:
    """(H, W) class codes -> (H, W, 3) uint8 via the fixed palette."""
    values = classmap.values if isinstance(classmap, ClassMap) else np.asarray(classmap)
    if values.ndim != 2 or values.size == 0:
        raise DataError(f"class map must be non-empty (H, W), got shape {values.shape}")
    ClassMap(values=values.astype(np.uint8, copy=False))  # code validation
    lut = np.zeros((256, 3), dtype=np.uint8)
    for code, rgb in PALETTE.items():
        lut[code] = rgb
    return lut[values.astype(np.uint8, copy=False)]


def render_classmap(classmap, out_path) -> np.ndarray:
    """Write the class map as a PNG; returns the RGB array that was encoded."""
    from PIL import Image  # deferred: keeps `--threads` effective before heavy imports

    rgb = classmap_to_rgb(classmap)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    try:
        atomic_write_bytes(out_path, buf.getvalue())
    except OSError as e:
        raise DataError(f"cannot write image {out_path}: {e}") from e
    return rgb
