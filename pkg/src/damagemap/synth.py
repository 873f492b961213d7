"""Synthetic data generators for desk-scale verification.

Three corpora, all pure functions of their seed:
  * a GCP corpus whose tiles share one hidden affine, a fraction of them
    carrying internally consistent but wrong coordinates (the robust-median
    path must reject them);
  * a two-event "disaster" of labeled patch bundles where damaged buildings
    exhibit a distinct post-event spectral shift, strong enough that the
    reference classifier must recover it;
  * a miniature staged-input tree (catalog, rasters, footprints, GCPs) that
    exercises every CLI stage end to end in seconds.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    PATCH_SIZE,
    S1_CHANNELS,
    S2_CHANNELS,
    PatchBundle,
    SplitScheme,
    write_bundle,
)
from .georef import TILE_SIZE, AffineTransform2D, GroundControlPoint, TileGCPSet
from .raster import CLASS_DAMAGED, CLASS_INTACT, CLASS_INVALID
from .util import atomic_write_text

# ---------------------------------------------------------------------------
# Georeference corpus

# Axis-aligned by construction (b = d = 0): tile boundaries are then
# constant-lon/lat lines, the regime the edge-snapping stage is defined for.
TRUE_TRANSFORM = AffineTransform2D(
    a=9.6e-5, b=0.0, c=30.25, d=0.0, e=-9.8e-5, f=10.75
)


def make_georef_corpus(
    n_tiles: int = 40,
    corrupt_fraction: float = 0.2,
    gcps_per_tile: int = 8,
    seed: int = 0,
    source_image_id: str = "src_synth",
) -> tuple[list[TileGCPSet], AffineTransform2D]:
    """Tiles whose GCP coordinates follow TRUE_TRANSFORM exactly, except for a
    corrupted fraction that follow a different affine (a shifted, slightly
    rotated one), so each corrupt tile still fits cleanly but votes wrong."""
    rng = np.random.default_rng(seed)
    n_corrupt = int(round(corrupt_fraction * n_tiles))
    corrupt_ids = set(rng.choice(n_tiles, size=n_corrupt, replace=False).tolist())

    tiles = []
    for t in range(n_tiles):
        if t in corrupt_ids:
            dx, dy = rng.uniform(20.0, 60.0, size=2) * rng.choice((-1.0, 1.0), size=2)
            rot = rng.uniform(1e-6, 4e-6)
            transform = AffineTransform2D(
                a=TRUE_TRANSFORM.a, b=TRUE_TRANSFORM.b + rot,
                c=TRUE_TRANSFORM.c + dx * TRUE_TRANSFORM.a,
                d=TRUE_TRANSFORM.d - rot, e=TRUE_TRANSFORM.e,
                f=TRUE_TRANSFORM.f + dy * TRUE_TRANSFORM.e,
            )
        else:
            transform = TRUE_TRANSFORM

        # interior points plus one GCP pinned to each tile edge so the
        # snapping stage always has material to work with
        n_inner = max(gcps_per_tile - 4, 4)
        px = rng.uniform(1.0, TILE_SIZE - 1.0, size=(n_inner, 2))
        edge_pts = np.array([
            [0.0, rng.uniform(0.0, TILE_SIZE)],
            [TILE_SIZE, rng.uniform(0.0, TILE_SIZE)],
            [rng.uniform(0.0, TILE_SIZE), 0.0],
            [rng.uniform(0.0, TILE_SIZE), TILE_SIZE],
        ])
        pts = np.vstack([px, edge_pts])
        geo = transform.apply(pts)
        gcps = [
            GroundControlPoint(image_x=float(p[0]), image_y=float(p[1]),
                               lon=float(g[0]), lat=float(g[1]))
            for p, g in zip(pts, geo)
        ]
        tiles.append(TileGCPSet(tile_id=f"tile_{t:03d}",
                                source_image_id=source_image_id, gcps=gcps))
    return tiles, TRUE_TRANSFORM


def write_gcp_jsonl(tiles: Sequence[TileGCPSet], path) -> None:
    lines = []
    for tile in tiles:
        for g in tile.gcps:
            lines.append(json.dumps({
                "tile_id": tile.tile_id,
                "source_image_id": tile.source_image_id,
                "x": g.image_x, "y": g.image_y, "lon": g.lon, "lat": g.lat,
            }, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def transform_error_tile_widths(
    fitted: AffineTransform2D, truth: AffineTransform2D
) -> float:
    """Worst corner displacement between two transforms, in tile widths."""
    corners = np.array([[0.0, 0.0], [TILE_SIZE, 0.0],
                        [0.0, TILE_SIZE], [TILE_SIZE, TILE_SIZE]])
    delta = fitted.apply(corners) - truth.apply(corners)
    err = float(np.abs(delta).max())
    width = float(np.abs(truth.apply(np.array([[TILE_SIZE, 0.0]]))
                         - truth.apply(np.array([[0.0, 0.0]]))).max())
    return err / width


# ---------------------------------------------------------------------------
# Synthetic disaster

# Per-band building signature (raw units, on top of the background field) and
# the post-event shift damaged pixels undergo. Amplitudes are several times
# the pixel noise so the per-pixel problem is cleanly separable; thresholds
# in the verification suite are set against this construction.
_NOISE_SIGMA = 0.25
_S2_BUILDING = np.array([1.0, -0.8, 0.9, 1.1, -0.7, 0.8, 1.2, -0.9,
                         0.7, 1.0, -0.8, 0.9], dtype=np.float64)
_S1_BUILDING = np.array([0.8, 0.6], dtype=np.float64)
_S2_DAMAGE = np.array([0.0, 0.6, -1.1, 0.0, 0.9, -0.8, 0.0, 1.2,
                       -0.9, 0.0, 0.7, -1.0], dtype=np.float64)
_S1_DAMAGE = np.array([-0.9, 0.7], dtype=np.float64)


def _smooth_field(rng, size: int, cell: int = 8) -> np.ndarray:
    coarse = rng.normal(scale=0.5, size=(size // cell + 1, size // cell + 1))
    return np.kron(coarse, np.ones((cell, cell)))[:size, :size]


def _random_label(rng, size: int) -> np.ndarray:
    label = np.zeros((size, size), np.uint8)
    for _ in range(int(rng.integers(3, 9))):
        h = int(rng.integers(6, 21))
        w = int(rng.integers(6, 21))
        r = int(rng.integers(0, size - h))
        c = int(rng.integers(0, size - w))
        cls = CLASS_DAMAGED if rng.random() < 0.5 else CLASS_INTACT
        label[r:r + h, c:c + w] = cls
        if rng.random() < 0.3:  # grow an L-shaped annex of the same class
            h2, w2 = int(rng.integers(4, 13)), int(rng.integers(4, 13))
            r2 = min(r + int(rng.integers(0, h)), size - h2)
            c2 = min(c + int(rng.integers(0, w)), size - w2)
            label[r2:r2 + h2, c2:c2 + w2] = cls
    return label


def _sensor_grids(rng, label: np.ndarray, size: int):
    """(s1_pre, s1_post, s2_pre, s2_post) float32 grids for one patch."""
    building = label != 0
    damaged = label == CLASS_DAMAGED

    def date_stack(bands_base, bld_sig, dmg_sig, with_damage):
        c = len(bands_base)
        gain = rng.uniform(0.9, 1.1)
        out = np.empty((c, size, size), dtype=np.float32)
        terrain = _smooth_field(rng, size)
        for b in range(c):
            img = bands_base[b] * gain + terrain
            img = img + bld_sig[b] * building
            if with_damage:
                img = img + dmg_sig[b] * damaged
            img = img + rng.normal(scale=_NOISE_SIGMA, size=(size, size))
            out[b] = img.astype(np.float32)
        return out

    s2_base = 2.0 + 0.1 * np.arange(S2_CHANNELS)
    s1_base = np.array([1.5, 1.0])
    s1_pre = date_stack(s1_base, _S1_BUILDING, _S1_DAMAGE, with_damage=False)
    s1_post = date_stack(s1_base, _S1_BUILDING, _S1_DAMAGE, with_damage=True)
    s2_pre = date_stack(s2_base, _S2_BUILDING, _S2_DAMAGE, with_damage=False)
    s2_post = date_stack(s2_base, _S2_BUILDING, _S2_DAMAGE, with_damage=True)
    return s1_pre, s1_post, s2_pre, s2_post


def make_event_patch(rng, patch_id: str, event_id: str,
                     size: int = PATCH_SIZE) -> PatchBundle:
    label = _random_label(rng, size)
    s1_pre, s1_post, s2_pre, s2_post = _sensor_grids(rng, label, size)
    if rng.random() < 0.15:  # a coverage gap along one border
        width = int(rng.integers(4, 17))
        side = int(rng.integers(4))
        sl = [slice(None), slice(None)]
        sl[side // 2] = slice(0, width) if side % 2 == 0 else slice(-width, None)
        label[tuple(sl)] = CLASS_INVALID
    invalid = label == CLASS_INVALID
    for grid in (s1_pre, s1_post, s2_pre, s2_post):
        grid[:, invalid] = 0.0
    return PatchBundle(patch_id=patch_id, event_id=event_id,
                       s1_pre=s1_pre, s1_post=s1_post,
                       s2_pre=s2_pre, s2_post=s2_post, label=label)


def make_synthetic_event(
    out_dir,
    n_patches: int = 200,
    patch_size: int = PATCH_SIZE,
    events: Sequence[str] = ("ev_alpha", "ev_beta"),
    train_fraction: float = 0.8,
    val_fraction: float = 0.0,
    seed: int = 0,
) -> SplitScheme:
    """Generate bundles plus a splits CSV under out_dir; returns the scheme.

    Patches alternate over the events; the split is a seeded shuffle into
    train/val/test by the given fractions.
    """
    out_dir = Path(out_dir)
    bundles_dir = out_dir / "bundles"
    bundles_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    assignment = {}
    for i in range(n_patches):
        event_id = events[i % len(events)]
        patch_id = f"{event_id}_{i:04d}"
        bundle = make_event_patch(rng, patch_id, event_id, size=patch_size)
        write_bundle(bundle, bundles_dir / f"{patch_id}.bundle")
        assignment[patch_id] = event_id

    ids = sorted(assignment)
    order = rng.permutation(len(ids))
    n_train = int(round(train_fraction * n_patches))
    n_val = int(round(val_fraction * n_patches))
    split_of = {}
    for rank, idx in enumerate(order):
        split = ("train" if rank < n_train
                 else "val" if rank < n_train + n_val else "test")
        split_of[ids[idx]] = split
    scheme = SplitScheme(
        name="xview2",
        assignments={pid: (assignment[pid], split_of[pid]) for pid in ids},
    )
    scheme.to_csv(out_dir / "splits.csv")
    return scheme


# ---------------------------------------------------------------------------
# Staged CLI inputs: a four-patch scene with everything on disk

_DEG_PER_PX = 1e-3


def _write_npz(path, data, transform, nodata_mask=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"data": data.astype(np.float32),
               "transform": np.array(transform.as_list(), dtype=np.float64)}
    if nodata_mask is not None:
        payload["nodata_mask"] = nodata_mask.astype(bool)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def make_demo_inputs(out_dir, seed: int = 0, patch_size: int = 32) -> dict:
    """Stage a complete miniature input tree for the CLI and return its paths.

    Four patches in one event; scene rasters carry the same building/damage
    signal as the synthetic disaster, sampled at source resolution; the post
    S2 candidates are arranged so the selection formula has real work to do.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    event_id = "ev_demo"
    event_date = "2020-06-01"

    # geography: patches tile a 2x2 block; source scenes cover it with margin
    west0, north0 = 30.0, 10.0
    span = patch_size * _DEG_PER_PX
    patch_rects = {}
    for i in range(4):
        r, c = divmod(i, 2)
        pid = f"{event_id}_{i:04d}"
        west = west0 + c * span
        north = north0 - r * span
        patch_rects[pid] = (west, north - span, west + span, north)

    src_size = int(patch_size * 2.5)
    src_transform = AffineTransform2D(
        a=_DEG_PER_PX, b=0.0, c=west0 - 8 * _DEG_PER_PX,
        d=0.0, e=-_DEG_PER_PX, f=north0 + 8 * _DEG_PER_PX,
    )

    # one hidden scene-wide label drives both the rasters and the polygons
    label = _random_label(rng, src_size)
    s1_pre, s1_post, s2_pre, s2_post = _sensor_grids(rng, label, src_size)

    scenes = {
        "s2_pre_a": (s2_pre, "s2", "2020-05-20", 0.9, None),
        "s2_pre_b": (s2_pre * 0.97, "s2", "2020-05-26", 0.4, None),
        "s2_post_a": (s2_post, "s2", "2020-06-04", 0.6, None),
        "s2_post_b": (s2_post * 1.03, "s2", "2020-06-12", 0.8, None),
        "s1_pre_a": (s1_pre, "s1", "2020-05-28", None, "orbit_17"),
        "s1_pre_b": (s1_pre * 1.05, "s1", "2020-05-23", None, "orbit_44"),
        "s1_post_a": (s1_post, "s1", "2020-06-03", None, "orbit_17"),
        "s1_post_b": (s1_post * 0.95, "s1", "2020-06-02", None, "orbit_44"),
    }
    rasters_dir = out / "rasters"
    candidates = []
    for scene_id, (data, platform, date, cs, orbit) in scenes.items():
        _write_npz(rasters_dir / f"{scene_id}.npz", data, src_transform)
        # raster paths are relative to the configured rasters directory
        entry = {"scene_id": scene_id, "platform": platform, "date": date,
                 "raster": f"{scene_id}.npz"}
        if cs is not None:
            entry["cloud_score"] = cs
        if orbit is not None:
            entry["orbit_path"] = orbit
        candidates.append(entry)

    catalog = {
        "schema_version": 1,
        "event": {"event_id": event_id, "event_date": event_date},
        "patches": [{"patch_id": pid, "candidates": candidates}
                    for pid in sorted(patch_rects)],
    }
    atomic_write_text(out / "catalog.json",
                      json.dumps(catalog, indent=2, sort_keys=True) + "\n")

    # polygons in geo space, traced from the hidden label's components
    features = _label_rect_features(label, src_transform)
    geojson = {"type": "FeatureCollection", "features": features}
    atomic_write_text(out / "footprints.geojson",
                      json.dumps(geojson, indent=2, sort_keys=True) + "\n")

    build_manifest = {
        "schema_version": 1,
        "patch_size": patch_size,
        "patches": [
            {"patch_id": pid, "event_id": event_id,
             "west": w, "south": s, "east": e, "north": n, "coverage": None}
            for pid, (w, s, e, n) in sorted(patch_rects.items())
        ],
    }
    atomic_write_text(out / "build_manifest.json",
                      json.dumps(build_manifest, indent=2, sort_keys=True) + "\n")

    tiles, _ = make_georef_corpus(n_tiles=10, corrupt_fraction=0.2, seed=seed + 1)
    write_gcp_jsonl(tiles, out / "gcps.jsonl")

    ids = sorted(patch_rects)
    scheme = SplitScheme(
        name="xview2",
        assignments={ids[0]: (event_id, "train"), ids[1]: (event_id, "train"),
                     ids[2]: (event_id, "train"), ids[3]: (event_id, "test")},
    )
    scheme.to_csv(out / "splits.csv")

    return {
        "catalog": out / "catalog.json",
        "gcps": out / "gcps.jsonl",
        "polygons": out / "footprints.geojson",
        "build_manifest": out / "build_manifest.json",
        "rasters": rasters_dir,
        "splits": out / "splits.csv",
        "event_id": event_id,
        "patch_ids": ids,
    }


def _label_rect_features(label: np.ndarray, transform: AffineTransform2D) -> list[dict]:
    """Trace maximal horizontal runs of the label into thin rectangle polygons.

    Crude but exact: every labeled pixel is covered by exactly one rectangle
    of its own class, so rasterizing these polygons back at source resolution
    reproduces the label. Damage grades: intact -> "no-damage", damaged ->
    "destroyed".
    """
    features = []
    h, w = label.shape
    for r in range(h):
        c = 0
        while c < w:
            cls = label[r, c]
            if cls in (CLASS_INTACT, CLASS_DAMAGED):
                c1 = c
                while c1 < w and label[r, c1] == cls:
                    c1 += 1
                corners_px = np.array([[c, r], [c1, r], [c1, r + 1], [c, r + 1]],
                                      dtype=np.float64)
                geo = transform.apply(corners_px)
                ring = geo.tolist() + [geo[0].tolist()]
                features.append({
                    "type": "Feature",
                    "properties": {"damage": "no-damage" if cls == CLASS_INTACT
                                   else "destroyed"},
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                })
                c = c1
            else:
                c += 1
    return features
