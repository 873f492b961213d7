"""Georeference repair for tiled VHR mosaics.

Tiles come with ground-control points (pixel position in the tile frame plus the
true lon/lat). Each tile with enough GCPs gets its own least-squares affine; the
per-source-image consensus is the element-wise median of those fits, which shrugs
off tiles whose GCP sets are garbage as long as they are a minority. A final
translation-only snap aligns tile edges to their boundary lines.

Pixel convention: x grows to the right, y grows downward, tile coordinates live
in [0, TILE_SIZE]. A transform maps (x, y) -> (a*x + b*y + c, d*x + e*y + f).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError

TILE_SIZE = 1024.0

# Tolerance for deciding a GCP sits on a tile edge, in pixels.
EDGE_EPS = 1e-6


@dataclass(frozen=True)
class AffineTransform2D:
    """2-D affine map (x, y) -> (a*x + b*y + c, d*x + e*y + f)."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (N, 2) array of (x, y) points; returns (N, 2)."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[-1] != 2:
            raise ValueError(f"expected (N, 2) points, got {pts.shape}")
        x, y = pts[:, 0], pts[:, 1]
        out = np.stack(
            [self.a * x + self.b * y + self.c, self.d * x + self.e * y + self.f],
            axis=1,
        )
        return out[0] if squeeze else out

    def compose(self, other: "AffineTransform2D") -> "AffineTransform2D":
        """self after other: compose(self, other)(p) == self(other(p))."""
        a = self.a * other.a + self.b * other.d
        b = self.a * other.b + self.b * other.e
        c = self.a * other.c + self.b * other.f + self.c
        d = self.d * other.a + self.e * other.d
        e = self.d * other.b + self.e * other.e
        f = self.d * other.c + self.e * other.f + self.f
        return AffineTransform2D(a, b, c, d, e, f)

    def inverse(self) -> "AffineTransform2D":
        det = self.a * self.e - self.b * self.d
        if abs(det) < 1e-300:
            raise NumericError("affine transform is singular, cannot invert")
        ia, ib = self.e / det, -self.b / det
        id_, ie = -self.d / det, self.a / det
        ic = -(ia * self.c + ib * self.f)
        if_ = -(id_ * self.c + ie * self.f)
        return AffineTransform2D(ia, ib, ic, id_, ie, if_)

    def as_list(self) -> list[float]:
        return [self.a, self.b, self.c, self.d, self.e, self.f]

    @classmethod
    def from_list(cls, params) -> "AffineTransform2D":
        params = list(params)
        if len(params) != 6:
            raise DataError(f"affine transform needs 6 parameters, got {len(params)}")
        return cls(*(float(p) for p in params))

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def apply_transform(transform: AffineTransform2D, points: np.ndarray) -> np.ndarray:
    """Functional alias for AffineTransform2D.apply."""
    return transform.apply(points)


@dataclass(frozen=True)
class GeoRect:
    """Axis-aligned geographic rectangle (boundary lines of a north-up tile)."""

    west: float
    south: float
    east: float
    north: float

    def __post_init__(self):
        if not (self.west < self.east and self.south < self.north):
            raise DataError(
                f"degenerate GeoRect: west={self.west} east={self.east} "
                f"south={self.south} north={self.north}"
            )


@dataclass(frozen=True)
class GroundControlPoint:
    """One correspondence between a tile pixel position and its true lon/lat."""

    image_x: float
    image_y: float
    lon: float
    lat: float

    def __post_init__(self):
        for name, v in (("image_x", self.image_x), ("image_y", self.image_y)):
            if not (-EDGE_EPS <= v <= TILE_SIZE + EDGE_EPS):
                raise DataError(f"GCP {name}={v} outside tile frame [0, {TILE_SIZE}]")


@dataclass
class TileGCPSet:
    """All GCPs of one tile, tagged with the source image the tile was cut from."""

    tile_id: str
    source_image_id: str
    gcps: list[GroundControlPoint] = field(default_factory=list)


def _normalizer(pts: np.ndarray) -> AffineTransform2D:
    """Centring/scaling transform used to condition the LSQ system."""
    mean = pts.mean(axis=0)
    std = pts.std(axis=0)
    if np.any(std <= 0):
        raise NumericError("degenerate GCP configuration: zero spread along an axis")
    return AffineTransform2D(1.0 / std[0], 0.0, -mean[0] / std[0],
                             0.0, 1.0 / std[1], -mean[1] / std[1])


def fit_tile_affine(tile: TileGCPSet, min_gcps: int = 6) -> AffineTransform2D:
    """Least-squares 6-parameter affine from tile pixel coords to lon/lat.

    The system is solved on centred, unit-scaled coordinates and the
    normalization composed back out exactly; raw [0, 1024] pixel values
    against ~1e-5-degree pixel sizes are otherwise too badly conditioned
    for the recovery tolerances this stage is held to.

    Raises DataError with fewer than min_gcps points and NumericError for
    degenerate (collinear or coincident) configurations.
    """
    if len(tile.gcps) < min_gcps:
        raise DataError(
            f"tile {tile.tile_id}: {len(tile.gcps)} GCPs, need at least {min_gcps}"
        )
    src = np.array([[g.image_x, g.image_y] for g in tile.gcps], dtype=np.float64)
    dst = np.array([[g.lon, g.lat] for g in tile.gcps], dtype=np.float64)

    n_src = _normalizer(src)
    n_dst = _normalizer(dst)
    s = n_src.apply(src)
    t = n_dst.apply(dst)

    M = np.column_stack([s[:, 0], s[:, 1], np.ones(len(s))])
    mtm = M.T @ M
    try:
        sol = np.linalg.solve(mtm, M.T @ t)  # (3, 2): columns are lon, lat params
    except np.linalg.LinAlgError as e:
        raise NumericError(f"tile {tile.tile_id}: singular GCP system ({e})") from e
    cond = np.linalg.cond(mtm)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericError(f"tile {tile.tile_id}: ill-conditioned GCP system")

    fitted = AffineTransform2D(sol[0, 0], sol[1, 0], sol[2, 0],
                               sol[0, 1], sol[1, 1], sol[2, 1])
    return n_dst.inverse().compose(fitted).compose(n_src)


def aggregate_global(transforms: list[AffineTransform2D]) -> AffineTransform2D:
    """Element-wise median of per-tile transforms.

    Robust to a minority of arbitrarily wrong fits: with more than half the
    tiles agreeing, the median equals the consensus parameters exactly.
    """
    if not transforms:
        raise DataError("aggregate_global: no tile transforms to aggregate")
    params = np.array([t.as_list() for t in transforms], dtype=np.float64)
    med = np.median(params, axis=0)
    return AffineTransform2D(*med)


def _edge_of(gcp: GroundControlPoint) -> list[str]:
    """Which tile edges (x0, x1, y0, y1) a GCP sits on; corners yield two."""
    edges = []
    if abs(gcp.image_x - 0.0) <= EDGE_EPS:
        edges.append("x0")
    if abs(gcp.image_x - TILE_SIZE) <= EDGE_EPS:
        edges.append("x1")
    if abs(gcp.image_y - 0.0) <= EDGE_EPS:
        edges.append("y0")
    if abs(gcp.image_y - TILE_SIZE) <= EDGE_EPS:
        edges.append("y1")
    return edges


def edge_residuals(
    transform: AffineTransform2D,
    edge_gcps: list[GroundControlPoint],
    tile_bounds: GeoRect,
) -> tuple[list[float], list[float]]:
    """Per-GCP residuals (target boundary coordinate minus transformed coordinate).

    Returns (lon_residuals, lat_residuals). Pixel edge x=0 maps to the west or
    east boundary depending on the transform's orientation, likewise for y and
    north/south. GCPs not on any edge raise DataError.
    """
    mid = TILE_SIZE / 2.0
    lon_increases_with_x = (
        transform.apply(np.array([TILE_SIZE, mid]))[0]
        > transform.apply(np.array([0.0, mid]))[0]
    )
    lat_decreases_with_y = (
        transform.apply(np.array([mid, TILE_SIZE]))[1]
        < transform.apply(np.array([mid, 0.0]))[1]
    )
    x_target = {
        "x0": tile_bounds.west if lon_increases_with_x else tile_bounds.east,
        "x1": tile_bounds.east if lon_increases_with_x else tile_bounds.west,
    }
    y_target = {
        "y0": tile_bounds.north if lat_decreases_with_y else tile_bounds.south,
        "y1": tile_bounds.south if lat_decreases_with_y else tile_bounds.north,
    }

    lon_res: list[float] = []
    lat_res: list[float] = []
    for g in edge_gcps:
        edges = _edge_of(g)
        if not edges:
            raise DataError(
                f"GCP at ({g.image_x}, {g.image_y}) is not on a tile edge"
            )
        mapped = transform.apply(np.array([g.image_x, g.image_y]))
        for edge in edges:
            if edge in ("x0", "x1"):
                lon_res.append(x_target[edge] - mapped[0])
            else:
                lat_res.append(y_target[edge] - mapped[1])
    return lon_res, lat_res


def snap_edges(
    transform: AffineTransform2D,
    edge_gcps: list[GroundControlPoint],
    tile_bounds: GeoRect,
) -> AffineTransform2D:
    """Translate a transform so tile-edge GCPs land on the tile boundary lines.

    Only the translation terms (c, f) move, each by the median residual along
    its axis; shape and scale are left to the least-squares stage. An axis with
    no edge GCPs keeps its translation. Intended for north-up tiles whose
    boundaries are constant-lon / constant-lat lines.
    """
    if not edge_gcps:
        raise DataError("snap_edges: no edge GCPs supplied")
    lon_res, lat_res = edge_residuals(transform, edge_gcps, tile_bounds)
    dc = float(np.median(lon_res)) if lon_res else 0.0
    df = float(np.median(lat_res)) if lat_res else 0.0
    return AffineTransform2D(transform.a, transform.b, transform.c + dc,
                             transform.d, transform.e, transform.f + df)


def load_gcp_jsonl(path: str | Path) -> dict[str, list[TileGCPSet]]:
    """Read a GCP JSONL file into tile sets grouped by source image.

    Each line: {"tile_id", "source_image_id", "x", "y", "lon", "lat"} with x, y
    in tile pixel units within [0, 1024].
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing GCP file: {path}")
    tiles: dict[tuple[str, str], TileGCPSet] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            key = (str(rec["source_image_id"]), str(rec["tile_id"]))
            gcp = GroundControlPoint(
                image_x=float(rec["x"]), image_y=float(rec["y"]),
                lon=float(rec["lon"]), lat=float(rec["lat"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            raise DataError(f"{path}:{ln}: bad GCP record ({e})") from e
        tiles.setdefault(key, TileGCPSet(tile_id=key[1], source_image_id=key[0])).gcps.append(gcp)

    by_source: dict[str, list[TileGCPSet]] = {}
    for (source_id, _), tile in sorted(tiles.items()):
        by_source.setdefault(source_id, []).append(tile)
    return by_source


def correct_source_image(
    tiles: list[TileGCPSet], min_gcps: int = 6
) -> tuple[AffineTransform2D, dict]:
    """Full correction for one source image: per-tile fits, median, edge snap.

    Tiles with fewer than min_gcps GCPs are skipped for fitting but still
    inherit the corrected transform downstream. Edge snapping pools edge GCPs
    from every tile; the boundary lines are taken as the per-edge median of the
    edge GCPs' own geo coordinates, which is exact when tile boundaries are
    constant-coordinate lines.

    Returns (corrected transform, residual stats dict).
    """
    fits = []
    skipped = []
    for tile in tiles:
        if len(tile.gcps) < min_gcps:
            skipped.append(tile.tile_id)
            continue
        fits.append(fit_tile_affine(tile, min_gcps=min_gcps))
    if not fits:
        raise DataError(
            f"source image {tiles[0].source_image_id if tiles else '?'}: "
            f"no tile has >= {min_gcps} GCPs"
        )
    consensus = aggregate_global(fits)

    edge_gcps = [g for t in tiles for g in t.gcps if _edge_of(g)]
    if edge_gcps:
        bounds = _bounds_from_edge_gcps(consensus, edge_gcps)
        corrected = snap_edges(consensus, edge_gcps, bounds)
    else:
        corrected = consensus

    all_gcps = [g for t in tiles for g in t.gcps]
    src = np.array([[g.image_x, g.image_y] for g in all_gcps])
    dst = np.array([[g.lon, g.lat] for g in all_gcps])
    res = corrected.apply(src) - dst
    dist = np.hypot(res[:, 0], res[:, 1])
    stats = {
        "n_tiles": len(tiles),
        "n_tiles_fitted": len(fits),
        "tiles_skipped_sparse": skipped,
        "n_gcps": len(all_gcps),
        "n_edge_gcps": len(edge_gcps),
        "residual_median": float(np.median(dist)),
        "residual_p95": float(np.percentile(dist, 95)),
        "residual_max": float(dist.max()),
    }
    return corrected, stats


def _bounds_from_edge_gcps(
    transform: AffineTransform2D, edge_gcps: list[GroundControlPoint]
) -> GeoRect:
    """Boundary lines implied by edge GCPs' true coordinates (per-edge median)."""
    buckets: dict[str, list[float]] = {"x0": [], "x1": [], "y0": [], "y1": []}
    for g in edge_gcps:
        for edge in _edge_of(g):
            buckets[edge].append(g.lon if edge in ("x0", "x1") else g.lat)

    # Fall back to the transform's own corner coordinates for edges nobody hit.
    corners = transform.apply(
        np.array([[0.0, 0.0], [TILE_SIZE, 0.0], [0.0, TILE_SIZE], [TILE_SIZE, TILE_SIZE]])
    )
    defaults = {
        "x0": (corners[0, 0] + corners[2, 0]) / 2.0,
        "x1": (corners[1, 0] + corners[3, 0]) / 2.0,
        "y0": (corners[0, 1] + corners[1, 1]) / 2.0,
        "y1": (corners[2, 1] + corners[3, 1]) / 2.0,
    }
    line = {
        k: float(np.median(v)) if v else defaults[k] for k, v in buckets.items()
    }
    west, east = sorted((line["x0"], line["x1"]))
    south, north = sorted((line["y0"], line["y1"]))
    if east - west <= 0 or north - south <= 0:
        # Single-edge degenerate case: widen with the transform's own extent.
        west, east = min(west, min(corners[:, 0])), max(east, max(corners[:, 0]))
        south, north = min(south, min(corners[:, 1])), max(north, max(corners[:, 1]))
    return GeoRect(west=west, south=south, east=east, north=north)
