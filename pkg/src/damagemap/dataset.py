"""Patch bundles and everything needed to build them.

A bundle is one training/evaluation unit: four co-registered sensor grids
(S1 pre/post with 2 channels, S2 pre/post with 12) plus a label map in the
simplified scheme 0 background / 1 intact / 2 damaged / 255 invalid. Grid
invalidity is folded into the label: a pixel with no usable imagery or no
usable ground truth is 255 and carries 0.0 in the grids.

On disk a bundle is a single binary file with CRC-protected sections; see
write_bundle for the exact layout.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .georef import AffineTransform2D, GeoRect
from .raster import CLASS_INVALID, ClassMap, RasterGrid, lanczos_resample
from .util import atomic_write_bytes, crc32

PATCH_SIZE = 128
S1_CHANNELS = 2
S2_CHANNELS = 12

BUNDLE_MAGIC = b"DMGBNDL1"
BUNDLE_VERSION = 1
_HEADER_SIZE = 64
_SECTION_NAMES = ("s1_pre", "s1_post", "s2_pre", "s2_post", "label")

# Source grading codes as found in damage-annotation polygons.
SOURCE_BACKGROUND = 0
SOURCE_NO_DAMAGE = 1
SOURCE_MINOR = 2
SOURCE_MAJOR = 3
SOURCE_DESTROYED = 4
SOURCE_UNCLASSIFIED = 5

_DAMAGE_NAMES = {
    "no-damage": SOURCE_NO_DAMAGE,
    "minor-damage": SOURCE_MINOR,
    "major-damage": SOURCE_MAJOR,
    "destroyed": SOURCE_DESTROYED,
    "un-classified": SOURCE_UNCLASSIFIED,
    "unclassified": SOURCE_UNCLASSIFIED,
}

# Simplification: background stays, no-damage -> intact, any damage grade ->
# damaged, unclassified -> invalid.
_SIMPLIFY_LUT = np.array([0, 1, 2, 2, 2, CLASS_INVALID], dtype=np.uint8)


@dataclass
class PatchBundle:
    """One bi-temporal training unit; arrays are channel-first."""

    patch_id: str
    event_id: str
    s1_pre: np.ndarray
    s1_post: np.ndarray
    s2_pre: np.ndarray
    s2_post: np.ndarray
    label: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("s1_pre", "s1_post", "s2_pre", "s2_post"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.ndim != 3:
                raise DataError(f"bundle {self.patch_id}: {name} must be (C, H, W)")
            setattr(self, name, arr)
        self.label = np.ascontiguousarray(self.label, dtype=np.uint8)
        if self.label.ndim != 2:
            raise DataError(f"bundle {self.patch_id}: label must be (H, W)")
        ClassMap(values=self.label)  # code validation
        hw = self.label.shape
        for name in ("s1_pre", "s1_post", "s2_pre", "s2_post"):
            if getattr(self, name).shape[1:] != hw:
                raise DataError(
                    f"bundle {self.patch_id}: {name} spatial shape "
                    f"{getattr(self, name).shape[1:]} != label {hw}"
                )
        if self.s1_pre.shape != self.s1_post.shape:
            raise DataError(f"bundle {self.patch_id}: S1 pre/post channel mismatch")
        if self.s2_pre.shape != self.s2_post.shape:
            raise DataError(f"bundle {self.patch_id}: S2 pre/post channel mismatch")

    def pre_stack(self) -> np.ndarray:
        """All pre-event channels, S1 first then S2."""
        return np.concatenate([self.s1_pre, self.s2_pre], axis=0)

    def post_stack(self) -> np.ndarray:
        return np.concatenate([self.s1_post, self.s2_post], axis=0)

    def label_map(self) -> ClassMap:
        return ClassMap(values=self.label)


def simplify_labels(source_codes: np.ndarray) -> np.ndarray:
    """Collapse source grading codes to {0, 1, 2, 255}.

    0 background, 1 no-damage, {2 minor, 3 major, 4 destroyed} -> damaged,
    5 unclassified -> invalid. Anything else raises.
    """
    codes = np.asarray(source_codes)
    bad = (codes < 0) | (codes > SOURCE_UNCLASSIFIED)
    if bad.any():
        unknown = sorted(int(v) for v in np.unique(codes[bad]))
        raise DataError(f"unknown damage grading codes {unknown}")
    return _SIMPLIFY_LUT[codes.astype(np.intp)]


def build_invalid_mask(
    shape: tuple[int, int],
    coverage_valid: Optional[np.ndarray] = None,
    unclassified: Optional[np.ndarray] = None,
    nodata_masks: Sequence[np.ndarray] = (),
) -> np.ndarray:
    """Union of everything that makes a pixel unusable.

    coverage_valid: True where VHR ground truth exists (None = everywhere);
    unclassified: True where an ungraded polygon sits; nodata_masks: any
    number of (H, W) True-is-nodata masks from the sensor grids.
    """
    invalid = np.zeros(shape, dtype=bool)
    if coverage_valid is not None:
        coverage_valid = np.asarray(coverage_valid, dtype=bool)
        if coverage_valid.shape != tuple(shape):
            raise DataError("coverage mask shape mismatch")
        invalid |= ~coverage_valid
    if unclassified is not None:
        unclassified = np.asarray(unclassified, dtype=bool)
        if unclassified.shape != tuple(shape):
            raise DataError("unclassified mask shape mismatch")
        invalid |= unclassified
    for m in nodata_masks:
        m = np.asarray(m, dtype=bool)
        if m.shape != tuple(shape):
            raise DataError("nodata mask shape mismatch")
        invalid |= m
    return invalid


def extract_patch(
    grid: RasterGrid,
    footprint: GeoRect,
    out_shape: tuple[int, int] = (PATCH_SIZE, PATCH_SIZE),
    a: int = 3,
) -> RasterGrid:
    """Resample the footprint window of a georeferenced grid to a fixed size.

    The footprint corners are mapped into source pixel space and the bounding
    window resampled; regions outside the source come back as nodata. Intended
    for north-up sources (a rotated transform turns the footprint into its
    pixel-space bounding box).
    """
    if grid.transform is None:
        raise DataError("extract_patch needs a georeferenced grid")
    inv = grid.transform.inverse()
    corners = inv.apply(np.array([
        [footprint.west, footprint.south],
        [footprint.west, footprint.north],
        [footprint.east, footprint.south],
        [footprint.east, footprint.north],
    ]))
    x0, x1 = float(corners[:, 0].min()), float(corners[:, 0].max())
    y0, y1 = float(corners[:, 1].min()), float(corners[:, 1].max())
    return lanczos_resample(grid, out_shape, a=a, src_window=((y0, y1), (x0, x1)))


# ---------------------------------------------------------------------------
# Polygon labels


@dataclass
class LabeledPolygon:
    """One polygon part: exterior ring plus holes, in lon/lat, with a grading code."""

    rings: list[np.ndarray]
    damage_code: int


@dataclass
class FootprintLabelSource:
    """Building footprints with damage grades for one area of interest."""

    features: list[LabeledPolygon] = field(default_factory=list)

    @classmethod
    def from_geojson_obj(cls, obj: dict) -> "FootprintLabelSource":
        """Parse a FeatureCollection whose features carry a "damage" property.

        damage may be a source grading code (1..5) or one of the usual names
        ("no-damage", "minor-damage", "major-damage", "destroyed",
        "un-classified"). MultiPolygons are split into parts.
        """
        if obj.get("type") != "FeatureCollection":
            raise DataError("label source must be a GeoJSON FeatureCollection")
        feats = []
        for k, feat in enumerate(obj.get("features", [])):
            props = feat.get("properties") or {}
            if "damage" not in props:
                raise DataError(f"feature {k}: missing damage property")
            code = _parse_damage(props["damage"], k)
            geom = feat.get("geometry") or {}
            gtype = geom.get("type")
            if gtype == "Polygon":
                polys = [geom["coordinates"]]
            elif gtype == "MultiPolygon":
                polys = geom["coordinates"]
            else:
                raise DataError(f"feature {k}: unsupported geometry type {gtype!r}")
            for rings in polys:
                arrs = [np.asarray(r, dtype=np.float64) for r in rings]
                for r in arrs:
                    if r.ndim != 2 or r.shape[1] != 2 or r.shape[0] < 3:
                        raise DataError(f"feature {k}: malformed ring")
                feats.append(LabeledPolygon(rings=arrs, damage_code=code))
        return cls(features=feats)


def _parse_damage(value, index: int) -> int:
    if isinstance(value, str):
        code = _DAMAGE_NAMES.get(value.lower())
        if code is None:
            raise DataError(f"feature {index}: unknown damage value {value!r}")
        return code
    code = int(value)
    if not (SOURCE_NO_DAMAGE <= code <= SOURCE_UNCLASSIFIED):
        raise DataError(f"feature {index}: damage code {code} outside 1..5")
    return code


def _even_odd_inside(rings_px: list[np.ndarray], h: int, w: int) -> np.ndarray:
    """Even-odd rasterization of one polygon against pixel centers.

    A center is inside when a ray to x = -inf crosses the boundary an odd
    number of times; holes fall out of the parity automatically.
    """
    px = np.arange(w, dtype=np.float64) + 0.5
    py = np.arange(h, dtype=np.float64) + 0.5
    inside = np.zeros((h, w), dtype=bool)
    for ring in rings_px:
        v = ring
        if not np.array_equal(v[0], v[-1]):
            v = np.vstack([v, v[:1]])
        x1, y1 = v[:-1, 0], v[:-1, 1]
        x2, y2 = v[1:, 0], v[1:, 1]
        for e in range(len(x1)):
            if y1[e] == y2[e]:
                continue  # horizontal edges never straddle a scanline
            straddle = (y1[e] > py) != (y2[e] > py)  # (h,)
            if not straddle.any():
                continue
            xint = (x2[e] - x1[e]) * (py - y1[e]) / (y2[e] - y1[e]) + x1[e]
            inside ^= straddle[:, None] & (px[None, :] < xint[:, None])
    return inside


def rasterize_labels(
    source: FootprintLabelSource,
    transform: AffineTransform2D,
    shape: tuple[int, int],
) -> np.ndarray:
    """Burn polygons into a source-code grid over the given patch geometry.

    transform maps patch pixel coords to lon/lat. Where graded polygons
    overlap, the worst grade wins; unclassified marks a pixel only when no
    graded polygon covers it.
    """
    h, w = shape
    inv = transform.inverse()
    grade = np.zeros((h, w), dtype=np.uint8)
    uncls = np.zeros((h, w), dtype=bool)
    for poly in source.features:
        rings_px = [inv.apply(r) for r in poly.rings]
        inside = _even_odd_inside(rings_px, h, w)
        if poly.damage_code == SOURCE_UNCLASSIFIED:
            uncls |= inside
        else:
            grade = np.maximum(grade, np.where(inside, poly.damage_code, 0).astype(np.uint8))
    out = grade.copy()
    out[(grade == 0) & uncls] = SOURCE_UNCLASSIFIED
    return out


# ---------------------------------------------------------------------------
# Bundle serialization
#
# Layout (all integers little-endian):
#   header, 64 bytes: 8-byte magic "DMGBNDL1", u32 version, 52 zero bytes
#   metadata section:  u64 payload length, u32 CRC32, JSON payload
#   five array sections in fixed order (s1_pre, s1_post, s2_pre, s2_post,
#   label), each u64 length + u32 CRC32 + raw C-order payload
# The file ends exactly at the last section; grids are float32 LE, the label
# uint8. Every single-byte corruption lands in a checked region: the header
# fields, a CRC-covered payload, or a length prefix that breaks the
# total-size equation.


def _pack_section(payload: bytes) -> bytes:
    return struct.pack("<QI", len(payload), crc32(payload)) + payload


def write_bundle(bundle: PatchBundle, path: str | Path) -> None:
    """Serialize a bundle; the write is atomic."""
    meta = {
        "schema_version": 1,
        "patch_id": bundle.patch_id,
        "event_id": bundle.event_id,
        "shapes": {name: list(getattr(bundle, name).shape) for name in _SECTION_NAMES},
        "meta": bundle.meta,
    }
    blob = bytearray()
    blob += BUNDLE_MAGIC
    blob += struct.pack("<I", BUNDLE_VERSION)
    blob += bytes(_HEADER_SIZE - len(blob))
    blob += _pack_section(json.dumps(meta, sort_keys=True).encode("utf-8"))
    for name in _SECTION_NAMES:
        arr = getattr(bundle, name)
        dtype = "<u1" if name == "label" else "<f4"
        blob += _pack_section(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    atomic_write_bytes(path, bytes(blob))


def read_bundle(path: str | Path) -> PatchBundle:
    """Parse and fully verify a bundle file.

    Raises DataError on any integrity violation: bad magic/version, non-zero
    header padding, CRC mismatch, section length inconsistency, or trailing
    bytes.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing bundle: {path}")
    raw = path.read_bytes()

    def corrupt(reason: str):
        return DataError(f"corrupt bundle {path}: {reason}")

    if len(raw) < _HEADER_SIZE:
        raise corrupt("truncated header")
    if raw[:8] != BUNDLE_MAGIC:
        raise corrupt("bad magic")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != BUNDLE_VERSION:
        raise corrupt(f"unsupported version {version}")
    if any(raw[12:_HEADER_SIZE]):
        raise corrupt("non-zero header padding")

    offset = _HEADER_SIZE
    payloads = []
    for k in range(1 + len(_SECTION_NAMES)):
        if offset + 12 > len(raw):
            raise corrupt(f"truncated section {k}")
        length, crc = struct.unpack_from("<QI", raw, offset)
        offset += 12
        if offset + length > len(raw):
            raise corrupt(f"section {k} runs past end of file")
        payload = raw[offset:offset + length]
        if crc32(payload) != crc:
            raise corrupt(f"CRC mismatch in section {k}")
        payloads.append(payload)
        offset += length
    if offset != len(raw):
        raise corrupt(f"{len(raw) - offset} trailing bytes")

    try:
        meta = json.loads(payloads[0].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise corrupt(f"bad metadata JSON ({e})")
    if meta.get("schema_version") != 1:
        raise corrupt(f"unsupported metadata schema {meta.get('schema_version')!r}")

    arrays = {}
    for name, payload in zip(_SECTION_NAMES, payloads[1:]):
        try:
            shape = tuple(int(v) for v in meta["shapes"][name])
        except (KeyError, TypeError, ValueError):
            raise corrupt(f"metadata missing shape for {name}")
        dtype = np.dtype("<u1" if name == "label" else "<f4")
        if len(payload) != int(np.prod(shape)) * dtype.itemsize:
            raise corrupt(f"section {name} length does not match its shape")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

    return PatchBundle(
        patch_id=str(meta.get("patch_id", "")),
        event_id=str(meta.get("event_id", "")),
        meta=meta.get("meta", {}),
        **arrays,
    )


# ---------------------------------------------------------------------------
# Splits


VALID_SPLITS = ("train", "val", "test")
VALID_SPLIT_NAMES = ("xview2", "event_based")


@dataclass
class SplitScheme:
    """Assignment of patches to train/val/test, tagged with the scheme name.

    "xview2" splits within events (every event appears in training);
    "event_based" holds out whole events. The assignment itself is data; the
    name records which protocol produced it.
    """

    name: str
    assignments: dict  # patch_id -> (event_id, split)

    def __post_init__(self):
        if self.name not in VALID_SPLIT_NAMES:
            raise DataError(
                f"unknown split scheme {self.name!r}, expected one of {VALID_SPLIT_NAMES}"
            )
        for pid, (event_id, split) in self.assignments.items():
            if split not in VALID_SPLITS:
                raise DataError(f"patch {pid}: unknown split {split!r}")

    def patch_ids(self, split: str) -> list[str]:
        if split not in VALID_SPLITS:
            raise DataError(f"unknown split {split!r}")
        return sorted(p for p, (_, s) in self.assignments.items() if s == split)

    def event_of(self, patch_id: str) -> str:
        try:
            return self.assignments[patch_id][0]
        except KeyError:
            raise DataError(f"patch {patch_id} not present in the split")

    def events(self) -> list[str]:
        return sorted({e for e, _ in self.assignments.values()})

    def to_csv(self, path: str | Path) -> None:
        rows = ["patch_id,event_id,split"]
        for pid in sorted(self.assignments):
            event_id, split = self.assignments[pid]
            rows.append(f"{pid},{event_id},{split}")
        atomic_write_bytes(path, ("\n".join(rows) + "\n").encode("utf-8"))

    @classmethod
    def from_csv(cls, path: str | Path, name: str) -> "SplitScheme":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing split file: {path}")
        assignments = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"patch_id", "event_id", "split"}
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise DataError(
                    f"{path}: split CSV must have columns patch_id,event_id,split"
                )
            for ln, row in enumerate(reader, start=2):
                pid = row["patch_id"]
                if pid in assignments:
                    raise DataError(f"{path}:{ln}: duplicate patch_id {pid}")
                assignments[pid] = (row["event_id"], row["split"])
        return cls(name=name, assignments=assignments)
