"""Core raster types and the pixel-level operations everything else leans on.

Grids are channel-first float arrays with an optional shared nodata mask and an
optional affine geotransform mapping continuous pixel (x, y) to (lon, lat).
Pixel (row i, col j) has its center at continuous (j + 0.5, i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateChannelError
from .georef import AffineTransform2D

CLASS_BACKGROUND = 0
CLASS_INTACT = 1
CLASS_DAMAGED = 2
CLASS_INVALID = 255
VALID_CLASS_CODES = (CLASS_BACKGROUND, CLASS_INTACT, CLASS_DAMAGED, CLASS_INVALID)

# Denominator floor for the resampling renormalization: below this the
# contributing weights have effectively cancelled and the pixel is nodata.
_DEN_TINY = 1e-12


@dataclass
class RasterGrid:
    """Multi-channel raster: data (C, H, W), optional nodata mask (H, W)."""

    data: np.ndarray
    transform: Optional[AffineTransform2D] = None
    nodata_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"RasterGrid data must be (C, H, W), got {self.data.shape}")
        if self.nodata_mask is not None:
            self.nodata_mask = np.asarray(self.nodata_mask, dtype=bool)
            if self.nodata_mask.shape != self.data.shape[1:]:
                raise DataError(
                    f"nodata mask {self.nodata_mask.shape} does not match "
                    f"grid {self.data.shape[1:]}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def valid_mask(self) -> np.ndarray:
        """(H, W) bool, True where the pixel carries data."""
        if self.nodata_mask is None:
            return np.ones(self.data.shape[1:], dtype=bool)
        return ~self.nodata_mask


@dataclass
class ClassMap:
    """(H, W) uint8 map with codes 0 background, 1 intact, 2 damaged, 255 invalid."""

    values: np.ndarray
    transform: Optional[AffineTransform2D] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DataError(f"ClassMap must be 2-D, got {self.values.shape}")
        if self.values.dtype != np.uint8:
            self.values = self.values.astype(np.uint8, casting="safe")
        bad = ~np.isin(self.values, VALID_CLASS_CODES)
        if bad.any():
            codes = sorted(int(v) for v in np.unique(self.values[bad]))
            raise DataError(f"ClassMap contains unknown codes {codes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def building_mask(self) -> np.ndarray:
        return np.isin(self.values, (CLASS_INTACT, CLASS_DAMAGED))

    def valid_mask(self) -> np.ndarray:
        return self.values != CLASS_INVALID


@dataclass
class NormStats:
    """Per-channel robust normalization bounds (1st and 99th percentiles)."""

    p1: np.ndarray
    p99: np.ndarray

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64)
        self.p99 = np.asarray(self.p99, dtype=np.float64)
        if self.p1.shape != self.p99.shape or self.p1.ndim != 1:
            raise DataError("NormStats p1/p99 must be matching 1-D arrays")

    @property
    def n_channels(self) -> int:
        return self.p1.shape[0]

    def to_json_obj(self) -> dict:
        return {
            "schema_version": 1,
            "channels": [
                {"p1": float(a), "p99": float(b)} for a, b in zip(self.p1, self.p99)
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "NormStats":
        try:
            chans = obj["channels"]
            p1 = [float(c["p1"]) for c in chans]
            p99 = [float(c["p99"]) for c in chans]
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed NormStats JSON: {e}") from e
        return cls(p1=np.array(p1), p99=np.array(p99))


def lanczos_kernel(t: np.ndarray, a: int) -> np.ndarray:
    """Lanczos window sinc(t) * sinc(t/a) for |t| < a, else 0."""
    t = np.asarray(t, dtype=np.float64)
    return np.sinc(t) * np.sinc(t / a) * (np.abs(t) < a)


def _axis_weights(
    n_src: int, n_dst: int, a: int, start: float = 0.0, span: Optional[float] = None
) -> np.ndarray:
    """Dense (n_dst, n_src) Lanczos weight matrix for one axis.

    The destination covers the continuous source interval [start, start+span]
    (the whole axis by default), so destination pixel j has its center at
    start + (j + 0.5) * span/n_dst - 0.5 in source index space. When the
    interval is sampled more coarsely than the source, the kernel is stretched
    by the scale factor (standard decimation), widening its support. Taps
    outside the grid are dropped (edge clamp, no reflection); the caller
    renormalizes by the sum of surviving weights.
    """
    if span is None:
        span = float(n_src)
    if span <= 0:
        raise DataError(f"resampling window span must be positive, got {span}")
    ratio = span / n_dst
    kscale = min(n_dst / span, 1.0)
    centers = start + (np.arange(n_dst, dtype=np.float64) + 0.5) * ratio - 0.5
    taps = np.arange(n_src, dtype=np.float64)
    return lanczos_kernel((taps[None, :] - centers[:, None]) * kscale, a)


def _resample_pass(
    data: np.ndarray, valid: np.ndarray, wm: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One separable pass along the last axis of (C, ..., n_src) data.

    Every output pixel is renormalized by the sum of weights that actually
    contributed (in-bounds and valid), so constant fields come through exactly
    and nodata never bleeds value mass into its neighbours.
    """
    v = valid.astype(np.float64)
    num = (data * v[None]) @ wm.T
    den = v @ wm.T
    absden = v @ np.abs(wm).T
    ok = (absden > 0.0) & (np.abs(den) > _DEN_TINY * np.maximum(absden, 1.0))
    out = np.zeros_like(num)
    np.divide(num, den[None], out=out, where=ok[None])
    return out, ok


def lanczos_resample(
    grid: RasterGrid,
    out_shape: tuple[int, int],
    a: int = 3,
    src_window: Optional[tuple[tuple[float, float], tuple[float, float]]] = None,
) -> RasterGrid:
    """Separable Lanczos resampling of a grid to (H_out, W_out).

    Horizontal pass first, then vertical. Nodata pixels are excluded per pass
    and the remaining weights renormalized; an output pixel is nodata only
    when no valid tap contributes. src_window = ((y0, y1), (x0, x1)) selects a
    fractional sub-rectangle in continuous source pixel coordinates (a pixel
    spans [i, i+1]); the default covers the whole grid. Output regions falling
    entirely outside the grid come back as nodata. The output geotransform is
    the source transform composed with the window mapping, covering exactly
    the window's extent.
    """
    if a < 1:
        raise DataError(f"lanczos order must be >= 1, got {a}")
    h_out, w_out = int(out_shape[0]), int(out_shape[1])
    if h_out < 1 or w_out < 1:
        raise DataError(f"bad output shape {out_shape}")
    c, h_src, w_src = grid.data.shape
    if src_window is None:
        (y0, y1), (x0, x1) = (0.0, float(h_src)), (0.0, float(w_src))
    else:
        (y0, y1), (x0, x1) = src_window
    if not (y1 > y0 and x1 > x0):
        raise DataError(f"bad source window {src_window}")

    data = grid.data.astype(np.float64, copy=False)
    valid = grid.valid_mask()

    wx = _axis_weights(w_src, w_out, a, start=x0, span=x1 - x0)
    data, valid = _resample_pass(data, valid, wx)

    wy = _axis_weights(h_src, h_out, a, start=y0, span=y1 - y0)
    data = np.swapaxes(data, 1, 2)
    valid = valid.T
    data, valid = _resample_pass(data, valid, wy)
    data = np.swapaxes(data, 1, 2)
    valid = valid.T

    out_transform = None
    if grid.transform is not None:
        window_map = AffineTransform2D(
            (x1 - x0) / w_out, 0.0, x0, 0.0, (y1 - y0) / h_out, y0
        )
        out_transform = grid.transform.compose(window_map)

    nodata = None
    if not valid.all():
        nodata = ~valid
    elif grid.nodata_mask is not None:
        nodata = np.zeros((h_out, w_out), dtype=bool)
    return RasterGrid(
        data=data.astype(grid.data.dtype, copy=False),
        transform=out_transform,
        nodata_mask=nodata,
    )


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with the (2r+1) square element (Chebyshev ball).

    Separable: a sliding-window any() along each axis in turn. radius 0 is a
    copy. Dilating by r then s equals dilating by r+s.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != bool:
        raise DataError(f"dilate_mask expects a 2-D bool mask, got {mask.dtype} {mask.shape}")
    radius = int(radius)
    if radius < 0:
        raise DataError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return mask.copy()
    out = mask
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="constant", constant_values=False)
        win = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=axis)
        out = win.any(axis=-1)
    return out


def fit_norm_stats(
    stacks: Sequence[np.ndarray],
    valid_masks: Optional[Sequence[np.ndarray]] = None,
) -> NormStats:
    """Pooled per-channel 1st/99th percentiles over every valid pixel.

    stacks: (C, H, W) arrays sharing C; valid_masks: matching (H, W) bool maps
    (all-valid when omitted). Percentiles use linear interpolation between
    order statistics (numpy's default). A channel whose p99 does not exceed
    its p1 is degenerate and raises, naming every offending channel.
    """
    stacks = list(stacks)
    if not stacks:
        raise DataError("fit_norm_stats: no input stacks")
    c = stacks[0].shape[0]
    pooled: list[list[np.ndarray]] = [[] for _ in range(c)]
    for i, arr in enumerate(stacks):
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != c:
            raise DataError(f"stack {i}: expected ({c}, H, W), got {arr.shape}")
        if valid_masks is not None:
            m = np.asarray(valid_masks[i], dtype=bool)
            if m.shape != arr.shape[1:]:
                raise DataError(f"stack {i}: mask shape {m.shape} mismatch")
            sel = arr[:, m]
        else:
            sel = arr.reshape(c, -1)
        for ch in range(c):
            pooled[ch].append(sel[ch])

    samples = [np.concatenate(chunks) if chunks else np.empty(0) for chunks in pooled]
    if any(s.size == 0 for s in samples):
        raise DataError("fit_norm_stats: a channel has no valid samples")
    p1 = np.array([np.percentile(s, 1.0, method="linear") for s in samples])
    p99 = np.array([np.percentile(s, 99.0, method="linear") for s in samples])
    degenerate = [ch for ch in range(c) if not p99[ch] > p1[ch]]
    if degenerate:
        raise DegenerateChannelError(degenerate)
    return NormStats(p1=p1, p99=p99)


def normalize(stack: np.ndarray, stats: NormStats) -> np.ndarray:
    """clip((x - p1) / (p99 - p1), 0, 1) per channel; dtype preserved."""
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] != stats.n_channels:
        raise DataError(
            f"normalize: stack {stack.shape} does not match "
            f"{stats.n_channels}-channel stats"
        )
    p1 = stats.p1.astype(stack.dtype)[:, None, None]
    inv = (1.0 / (stats.p99 - stats.p1)).astype(stack.dtype)[:, None, None]
    return np.clip((stack - p1) * inv, 0.0, 1.0)
