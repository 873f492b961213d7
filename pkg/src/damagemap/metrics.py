"""Buffered evaluation metrics for building-damage maps.

Localization F1 scores building-vs-background over all valid pixels, except
that for a buffer B > 0 the ring dilate(true buildings, B) minus the buildings
themselves becomes don't-care: small footprint misalignments stop counting as
errors. Damage F1 is the harmonic mean of the intact and damaged one-vs-rest
F1s, computed only inside true building footprints, and therefore does not
depend on the buffer at all. The composite score is 0.3 * loc + 0.7 * dmg.

An F1 whose confusion row is empty (tp + fp + fn == 0) is undefined: it is
reported as such, flagged, and excluded from harmonic means, never silently
coerced to 0 or 1. Pooling is micro everywhere: counts are summed over a
patch, an event, or the whole split before a single F1 is computed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .dataset import SplitScheme
from .errors import DataError
from .raster import CLASS_DAMAGED, CLASS_INTACT, CLASS_INVALID, ClassMap, dilate_mask

log = logging.getLogger(__name__)

COMP_LOC_WEIGHT = 0.3
COMP_DMG_WEIGHT = 0.7

MapLike = Union[ClassMap, np.ndarray]


@dataclass
class ConfusionCounts:
    """Binary confusion counts; total equals the number of scored pixels."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def f1(self) -> Optional[float]:
        """2TP / (2TP + FP + FN), or None when the row is empty (undefined)."""
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            return None
        return 2.0 * self.tp / denom

    def as_dict(self) -> dict:
        return {"tp": int(self.tp), "fp": int(self.fp),
                "fn": int(self.fn), "tn": int(self.tn)}


def _values(m: MapLike) -> np.ndarray:
    arr = m.values if isinstance(m, ClassMap) else np.asarray(m)
    if arr.ndim != 2:
        raise DataError(f"class map must be 2-D, got {arr.shape}")
    return arr


def _aligned(pred: MapLike, truth: MapLike) -> tuple[np.ndarray, np.ndarray]:
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise DataError(f"pred {p.shape} and truth {t.shape} are not aligned")
    return p, t


def loc_confusion(
    pred: MapLike, truth: MapLike, buffer_px: int
) -> tuple[ConfusionCounts, int, int]:
    """Building-vs-background confusion with ring exclusion.

    Returns (counts, ignored_ring, invalid): ring pixels that would otherwise
    have been scored, and truth-invalid pixels.
    """
    p, t = _aligned(pred, truth)
    if buffer_px < 0:
        raise DataError(f"buffer must be >= 0, got {buffer_px}")
    truth_b = np.isin(t, (CLASS_INTACT, CLASS_DAMAGED))
    pred_b = np.isin(p, (CLASS_INTACT, CLASS_DAMAGED))
    invalid = t == CLASS_INVALID
    if buffer_px > 0:
        ring = dilate_mask(truth_b, buffer_px) & ~truth_b
    else:
        ring = np.zeros_like(truth_b)
    scored = ~invalid & ~ring
    cc = ConfusionCounts(
        tp=int((pred_b & truth_b & scored).sum()),
        fp=int((pred_b & ~truth_b & scored).sum()),
        fn=int((~pred_b & truth_b & scored).sum()),
        tn=int((~pred_b & ~truth_b & scored).sum()),
    )
    return cc, int((ring & ~invalid).sum()), int(invalid.sum())


def dmg_confusion(
    pred: MapLike, truth: MapLike
) -> tuple[ConfusionCounts, ConfusionCounts, int]:
    """One-vs-rest confusion for intact and damaged over true building pixels.

    A background prediction on a building pixel is a miss for the true class
    and never a false positive for the other; there is no escape from the
    footprint domain, so the buffer plays no role here.
    """
    p, t = _aligned(pred, truth)
    domain = np.isin(t, (CLASS_INTACT, CLASS_DAMAGED))
    out = []
    for cls in (CLASS_INTACT, CLASS_DAMAGED):
        tt = (t == cls) & domain
        pp = (p == cls) & domain
        out.append(ConfusionCounts(
            tp=int((tt & pp).sum()),
            fp=int((pp & ~tt).sum()),
            fn=int((tt & ~pp).sum()),
            tn=int((~tt & ~pp & domain).sum()),
        ))
    return out[0], out[1], int(domain.sum())


def f1_loc(pred: MapLike, truth: MapLike, buffer_px: int) -> Optional[float]:
    """Buffered localization F1; None when no pixel is scored (undefined)."""
    cc, _, _ = loc_confusion(pred, truth, buffer_px)
    return cc.f1()


def harmonic_mean_defined(parts: Sequence[Optional[float]]) -> Optional[float]:
    """Harmonic mean over the defined entries; None if nothing is defined.

    A single defined entry is its own mean; a zero entry pins the mean to 0
    (the 0/0 limit included).
    """
    vals = [v for v in parts if v is not None]
    if not vals:
        return None
    if any(v == 0.0 for v in vals):
        return 0.0
    return len(vals) / sum(1.0 / v for v in vals)


def f1_dmg(
    pred: MapLike, truth: MapLike
) -> tuple[Optional[float], Optional[float], Optional[float]]:
    """(F1_intact, F1_damaged, F1_dmg) over true building pixels.

    Undefined per-class scores are excluded from the harmonic mean; with no
    building pixels at all, everything is undefined.
    """
    cc_i, cc_d, _ = dmg_confusion(pred, truth)
    f1_i, f1_d = cc_i.f1(), cc_d.f1()
    return f1_i, f1_d, harmonic_mean_defined((f1_i, f1_d))


def f1_comp(loc_score: float, dmg_score: float) -> float:
    """Competition score 0.3 * F1_loc + 0.7 * F1_dmg."""
    for name, v in (("loc", loc_score), ("dmg", dmg_score)):
        if not (0.0 <= v <= 1.0):
            raise DataError(f"f1_comp: {name} score {v} outside [0, 1]")
    return COMP_LOC_WEIGHT * loc_score + COMP_DMG_WEIGHT * dmg_score


# ---------------------------------------------------------------------------
# Report assembly


@dataclass
class _Accumulator:
    """Pooled counts for one scoring unit (patch, event, or everything)."""

    buffers: tuple[int, ...]
    n_patches: int = 0
    loc: dict = field(default_factory=dict)       # buffer -> ConfusionCounts
    ring: dict = field(default_factory=dict)      # buffer -> ignored ring px
    invalid: int = 0
    intact: ConfusionCounts = field(default_factory=ConfusionCounts)
    damaged: ConfusionCounts = field(default_factory=ConfusionCounts)
    dmg_scored: int = 0

    def __post_init__(self):
        for b in self.buffers:
            self.loc.setdefault(b, ConfusionCounts())
            self.ring.setdefault(b, 0)

    def add_patch(self, pred: MapLike, truth: MapLike) -> None:
        for b in self.buffers:
            cc, ring, invalid = loc_confusion(pred, truth, b)
            self.loc[b] = self.loc[b] + cc
            self.ring[b] += ring
            if b == self.buffers[0]:
                self.invalid += invalid
        cc_i, cc_d, scored = dmg_confusion(pred, truth)
        self.intact = self.intact + cc_i
        self.damaged = self.damaged + cc_d
        self.dmg_scored += scored
        self.n_patches += 1

    def merge(self, other: "_Accumulator") -> None:
        for b in self.buffers:
            self.loc[b] = self.loc[b] + other.loc[b]
            self.ring[b] += other.ring[b]
        self.invalid += other.invalid
        self.intact = self.intact + other.intact
        self.damaged = self.damaged + other.damaged
        self.dmg_scored += other.dmg_scored
        self.n_patches += other.n_patches

    def scores(self) -> dict:
        undefined: list[str] = []
        f1_i, f1_d = self.intact.f1(), self.damaged.f1()
        dmg = harmonic_mean_defined((f1_i, f1_d))
        if f1_i is None:
            undefined.append("f1_intact")
        if f1_d is None:
            undefined.append("f1_damaged")
        if dmg is None:
            undefined.append("f1_dmg")
        loc_block = {}
        comp_block = {}
        for b in self.buffers:
            loc = self.loc[b].f1()
            if loc is None:
                undefined.append(f"f1_loc[B={b}]")
            comp = None
            if loc is not None and dmg is not None:
                comp = f1_comp(loc, dmg)
            else:
                undefined.append(f"f1_comp[B={b}]")
            loc_block[str(b)] = {
                "f1": loc,
                **self.loc[b].as_dict(),
                "scored": self.loc[b].total,
                "ignored_ring": self.ring[b],
            }
            comp_block[str(b)] = comp
        return {
            "n_patches": self.n_patches,
            "loc": loc_block,
            "dmg": {
                "f1_intact": f1_i,
                "f1_damaged": f1_d,
                "f1_dmg": dmg,
                "intact": self.intact.as_dict(),
                "damaged": self.damaged.as_dict(),
                "scored": self.dmg_scored,
            },
            "comp": comp_block,
            "invalid_px": self.invalid,
            "undefined": undefined,
        }


@dataclass
class EvalReport:
    """Per-event and aggregate buffered scores, plus per-patch detail.

    buffers lists every evaluated ring radius; 0 is the strict score. Scores
    blocks share one shape (see _Accumulator.scores). skipped maps events that
    could not be evaluated to their missing patch ids.
    """

    buffers: tuple[int, ...]
    split_name: str
    events: dict
    aggregate: dict
    per_patch: dict
    skipped: dict

    def to_json_obj(self) -> dict:
        return {
            "schema_version": 1,
            "pooling": "micro",
            "buffer_convention": {
                str(b): ("strict" if b == 0 else "ring_excluded") for b in self.buffers
            },
            "buffers": list(self.buffers),
            "split": self.split_name,
            "events": self.events,
            "aggregate": self.aggregate,
            "per_patch": self.per_patch,
            "skipped_events": self.skipped,
        }

    CSV_COLUMNS = (
        "event_id,buffer,f1_loc,f1_intact,f1_damaged,f1_dmg,f1_comp,"
        "loc_scored_px,loc_ignored_ring_px,dmg_scored_px,invalid_px,"
        "n_patches,undefined"
    )

    def to_csv_text(self) -> str:
        """One row per event x buffer, aggregate rows labeled ALL.

        Undefined scores are empty cells; the undefined column lists the
        affected score names for that row.
        """
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        lines = [self.CSV_COLUMNS]
        items = sorted(self.events.items()) + [("ALL", self.aggregate)]
        for event_id, s in items:
            for b in self.buffers:
                key = str(b)
                row_flags = [
                    u for u in s["undefined"]
                    if "[B=" not in u or u.endswith(f"[B={b}]")
                ]
                lines.append(",".join([
                    event_id,
                    str(b),
                    fmt(s["loc"][key]["f1"]),
                    fmt(s["dmg"]["f1_intact"]),
                    fmt(s["dmg"]["f1_damaged"]),
                    fmt(s["dmg"]["f1_dmg"]),
                    fmt(s["comp"][key]),
                    str(s["loc"][key]["scored"]),
                    str(s["loc"][key]["ignored_ring"]),
                    str(s["dmg"]["scored"]),
                    str(s["invalid_px"]),
                    str(s["n_patches"]),
                    ";".join(row_flags),
                ]))
        return "\n".join(lines) + "\n"


def per_event_report(
    predictions: dict,
    truths: dict,
    split: SplitScheme,
    buffers: Sequence[int] = (0, 3),
    eval_split: str = "test",
) -> EvalReport:
    """Micro-pooled scores for one split's patches, grouped by event.

    An event with any missing prediction is skipped entirely (logged, and
    listed in the report); a missing truth map is a data error. Counts are
    pooled over a whole event before its F1s are computed, and over all
    surviving events for the aggregate block.
    """
    buffers = tuple(int(b) for b in buffers)
    if not buffers:
        raise DataError("per_event_report: no buffers requested")
    if any(b < 0 for b in buffers):
        raise DataError(f"negative buffer in {buffers}")
    if len(set(buffers)) != len(buffers):
        raise DataError(f"duplicate buffers in {buffers}")

    test_ids = split.patch_ids(eval_split)
    if not test_ids:
        raise DataError(f"split has no {eval_split} patches to evaluate")
    missing_truth = [p for p in test_ids if p not in truths]
    if missing_truth:
        raise DataError("missing truth maps for: " + ", ".join(missing_truth))

    by_event: dict[str, list[str]] = {}
    for pid in test_ids:
        by_event.setdefault(split.event_of(pid), []).append(pid)

    events: dict[str, dict] = {}
    per_patch: dict[str, dict] = {}
    skipped: dict[str, list[str]] = {}
    total = _Accumulator(buffers=buffers)
    for event_id in sorted(by_event):
        pids = by_event[event_id]
        missing = [p for p in pids if p not in predictions]
        if missing:
            skipped[event_id] = missing
            log.warning(
                "event %s skipped: missing predictions for %s",
                event_id, ", ".join(missing),
            )
            continue
        acc = _Accumulator(buffers=buffers)
        for pid in pids:
            patch_acc = _Accumulator(buffers=buffers)
            patch_acc.add_patch(predictions[pid], truths[pid])
            per_patch[pid] = patch_acc.scores()
            per_patch[pid]["event_id"] = event_id
            acc.merge(patch_acc)
        events[event_id] = acc.scores()
        total.merge(acc)

    return EvalReport(
        buffers=buffers,
        split_name=split.name,
        events=events,
        aggregate=total.scores(),
        per_patch=per_patch,
        skipped=skipped,
    )
