"""Automated scene selection for bi-temporal patch assembly.

Post-event S2 scenes trade cloud cover against recency: score = 0.4 * CS +
0.6 * TS with TS_i = 1/sqrt(i + 1) for the i-th scene after the event, over
candidates whose clear-sky score clears a threshold (no survivor: fall back to
the unconstrained argmax and flag it). The pre-event S2 scene is simply the
clearest. S1 scenes have no clouds to dodge; the pre/post pair minimizes the
summed day offset to the chosen S2 dates, by default restricted to a shared
relative orbit so the viewing geometry matches across the pair.

All tie-breaks are deterministic and documented on each function.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Optional

from .errors import DataError, PairingError


@dataclass(frozen=True)
class SceneCandidate:
    """One acquisition in a patch's catalog."""

    scene_id: str
    platform: str  # "s1" | "s2"
    date: dt.date
    cloud_score: Optional[float] = None  # clear-sky score in [0, 1], higher is clearer
    orbit_direction: Optional[str] = None
    orbit_path: Optional[str] = None  # relative orbit identifier

    def __post_init__(self):
        if self.platform not in ("s1", "s2"):
            raise DataError(f"scene {self.scene_id}: unknown platform {self.platform!r}")
        if self.cloud_score is not None and not (0.0 <= self.cloud_score <= 1.0):
            raise DataError(
                f"scene {self.scene_id}: cloud score {self.cloud_score} outside [0, 1]"
            )


@dataclass(frozen=True)
class SelectionPolicy:
    """Knobs of the selection rule; defaults are the operating point used throughout."""

    cloud_weight: float = 0.4
    temporal_weight: float = 0.6
    cs_threshold: float = 0.5
    require_same_orbit: bool = True

    def as_dict(self) -> dict:
        return {
            "cloud_weight": self.cloud_weight,
            "temporal_weight": self.temporal_weight,
            "cs_threshold": self.cs_threshold,
            "require_same_orbit": self.require_same_orbit,
        }


def temporal_score(index: int) -> float:
    """TS_i = 1 / sqrt(i + 1) for the i-th post-event scene (0-based)."""
    index = int(index)
    if index < 0:
        raise DataError(f"temporal index must be >= 0, got {index}")
    return 1.0 / math.sqrt(index + 1.0)


def _require_cloud_scores(candidates: list[SceneCandidate]) -> None:
    missing = [c.scene_id for c in candidates if c.cloud_score is None]
    if missing:
        raise DataError(
            "S2 candidates without a cloud score: " + ", ".join(sorted(missing))
        )


def select_post_scene(
    candidates: list[SceneCandidate], policy: SelectionPolicy = SelectionPolicy()
) -> tuple[SceneCandidate, bool]:
    """Pick the post-event S2 scene.

    Candidates are every S2 acquisition after the event; the temporal index is
    their rank in (date, scene_id) order. Scenes with CS > cs_threshold compete
    on cloud_weight * CS + temporal_weight * TS; if none clears the bar, the
    constraint is dropped and the flag in the returned (scene, fallback_applied)
    pair is set. Equal scores resolve to the smaller temporal index, then the
    smaller scene_id.
    """
    if not candidates:
        raise DataError("select_post_scene: empty candidate list")
    _require_cloud_scores(candidates)
    ordered = sorted(candidates, key=lambda c: (c.date, c.scene_id))

    def score(i: int, c: SceneCandidate) -> float:
        return policy.cloud_weight * c.cloud_score + policy.temporal_weight * temporal_score(i)

    eligible = [(i, c) for i, c in enumerate(ordered) if c.cloud_score > policy.cs_threshold]
    fallback = not eligible
    pool = list(enumerate(ordered)) if fallback else eligible
    pool.sort(key=lambda ic: (-score(*ic), ic[0], ic[1].scene_id))
    return pool[0][1], fallback


def select_pre_scene(
    candidates: list[SceneCandidate], policy: SelectionPolicy = SelectionPolicy()
) -> SceneCandidate:
    """Pick the pre-event S2 scene: the clearest one.

    Equal cloud scores resolve to the later date (closest to the event), then
    the smaller scene_id.
    """
    if not candidates:
        raise DataError("select_pre_scene: empty candidate list")
    _require_cloud_scores(candidates)
    ranked = sorted(candidates,
                    key=lambda c: (-c.cloud_score, -c.date.toordinal(), c.scene_id))
    return ranked[0]


def pair_s1_scenes(
    pre_candidates: list[SceneCandidate],
    post_candidates: list[SceneCandidate],
    s2_pre_date: dt.date,
    s2_post_date: dt.date,
    policy: SelectionPolicy = SelectionPolicy(),
) -> tuple[SceneCandidate, SceneCandidate]:
    """Pick the S1 pre/post pair closest in time to the chosen S2 dates.

    Cost of a pair = |pre.date - s2_pre_date| + |post.date - s2_post_date| in
    days. With require_same_orbit (the default) only pairs sharing orbit_path
    are admissible; candidates missing orbit_path are a data error then. Ties
    resolve to the lexicographically smaller (pre_id, post_id). No admissible
    pair raises PairingError saying which constraint emptied the pool.
    """
    if not pre_candidates or not post_candidates:
        raise PairingError("pair_s1_scenes: empty pre or post candidate list")
    if policy.require_same_orbit:
        missing = [
            c.scene_id
            for c in (*pre_candidates, *post_candidates)
            if c.orbit_path is None
        ]
        if missing:
            raise DataError(
                "S1 candidates without orbit_path under the same-orbit rule: "
                + ", ".join(sorted(missing))
            )

    best_key = None
    best_pair = None
    for pre in pre_candidates:
        for post in post_candidates:
            if policy.require_same_orbit and pre.orbit_path != post.orbit_path:
                continue
            cost = abs((pre.date - s2_pre_date).days) + abs((post.date - s2_post_date).days)
            key = (cost, pre.scene_id, post.scene_id)
            if best_key is None or key < best_key:
                best_key = key
                best_pair = (pre, post)
    if best_pair is None:
        orbits_pre = sorted({c.orbit_path for c in pre_candidates})
        orbits_post = sorted({c.orbit_path for c in post_candidates})
        raise PairingError(
            "no S1 pair shares an orbit path "
            f"(pre orbits {orbits_pre}, post orbits {orbits_post}); "
            "relax require_same_orbit to allow cross-orbit pairs"
        )
    return best_pair
