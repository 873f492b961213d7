"""Tests for the synthetic data generators.

These guard the properties the pipeline tests and calibration runs lean on:
exact transform recovery on the georef corpus, bundle validity and split
bookkeeping for generated events, and the demo inputs' internal consistency.
"""

import json

import numpy as np
import pytest

from damagemap.dataset import SplitScheme, read_bundle
from damagemap.georef import AffineTransform2D, load_gcp_jsonl, correct_source_image
from damagemap.synth import (
    TRUE_TRANSFORM,
    make_demo_inputs,
    make_georef_corpus,
    make_synthetic_event,
    transform_error_tile_widths,
    write_gcp_jsonl,
)


class TestGeorefCorpus:
    def test_deterministic(self):
        a, _ = make_georef_corpus(n_tiles=12, seed=5)
        b, _ = make_georef_corpus(n_tiles=12, seed=5)
        assert [t.tile_id for t in a] == [t.tile_id for t in b]
        for ta, tb in zip(a, b):
            for ga, gb in zip(ta.gcps, tb.gcps):
                assert (ga.image_x, ga.image_y, ga.lon, ga.lat) == \
                       (gb.image_x, gb.image_y, gb.lon, gb.lat)

    def test_seed_changes_corpus(self):
        a, _ = make_georef_corpus(n_tiles=12, seed=5)
        b, _ = make_georef_corpus(n_tiles=12, seed=6)
        xa = [g.image_x for t in a for g in t.gcps]
        xb = [g.image_x for t in b for g in t.gcps]
        assert xa != xb

    def test_shape_and_counts(self):
        tiles, truth = make_georef_corpus(n_tiles=40, gcps_per_tile=8, seed=0)
        assert truth is TRUE_TRANSFORM
        assert len(tiles) == 40
        assert all(len(t.gcps) == 8 for t in tiles)
        # four of the eight are pinned to the tile edges
        for t in tiles:
            on_edge = sum(
                1 for g in t.gcps
                if 0.0 in (g.image_x, g.image_y) or 1024.0 in (g.image_x, g.image_y)
            )
            assert on_edge >= 4

    def test_recovery_is_exact(self):
        tiles, truth = make_georef_corpus(n_tiles=40, corrupt_fraction=0.2, seed=3)
        fitted, stats = correct_source_image(tiles)
        assert transform_error_tile_widths(fitted, truth) < 1e-9
        assert stats["n_tiles"] == 40
        # the corrupt fifth shows up as residual outliers, not in the estimate
        assert stats["residual_max"] > stats["residual_median"]

    def test_jsonl_round_trip(self, tmp_path):
        tiles, _ = make_georef_corpus(n_tiles=6, seed=1, source_image_id="img_a")
        path = tmp_path / "gcps.jsonl"
        write_gcp_jsonl(tiles, path)
        loaded = load_gcp_jsonl(path)
        assert set(loaded) == {"img_a"}
        got = loaded["img_a"]
        assert [t.tile_id for t in got] == [t.tile_id for t in tiles]
        for ta, tb in zip(got, tiles):
            for ga, gb in zip(ta.gcps, tb.gcps):
                assert ga.lon == pytest.approx(gb.lon, abs=0)
                assert ga.lat == pytest.approx(gb.lat, abs=0)


class TestTransformError:
    def test_zero_for_identical(self):
        assert transform_error_tile_widths(TRUE_TRANSFORM, TRUE_TRANSFORM) == 0.0

    def test_pure_shift(self):
        # shifting the origin by 100 source pixels is 100/1024 tile widths
        t = TRUE_TRANSFORM
        shifted = AffineTransform2D(t.a, t.b, t.c + 100 * t.a, t.d, t.e, t.f)
        err = transform_error_tile_widths(shifted, t)
        assert err == pytest.approx(100.0 / 1024.0, rel=1e-12)


class TestSyntheticEvent:
    def test_structure_and_splits(self, tmp_path):
        split = make_synthetic_event(tmp_path, n_patches=12, patch_size=32,
                                     train_fraction=0.75, seed=4)
        assert split.name == "xview2"
        assert len(split.patch_ids("train")) == 9
        assert len(split.patch_ids("test")) == 3
        assert not split.patch_ids("val")
        # round-robin event assignment
        events = {split.event_of(pid) for pid in split.assignments}
        assert events == {"ev_alpha", "ev_beta"}
        on_disk = SplitScheme.from_csv(tmp_path / "splits.csv", name="xview2")
        assert on_disk.assignments == split.assignments

    def test_val_fraction(self, tmp_path):
        split = make_synthetic_event(tmp_path, n_patches=10, patch_size=32,
                                     train_fraction=0.6, val_fraction=0.2, seed=4)
        assert len(split.patch_ids("train")) == 6
        assert len(split.patch_ids("val")) == 2
        assert len(split.patch_ids("test")) == 2

    def test_bundles_valid(self, tmp_path):
        split = make_synthetic_event(tmp_path, n_patches=8, patch_size=32, seed=7)
        seen = set()
        for pid in sorted(split.assignments):
            b = read_bundle(tmp_path / "bundles" / f"{pid}.bundle")
            assert b.patch_id == pid
            assert b.s2_pre.shape == (12, 32, 32)
            assert b.s1_pre.shape == (2, 32, 32)
            assert b.label.shape == (32, 32)
            seen |= set(np.unique(b.label).tolist())
            # invalid pixels are zero-filled in every grid
            inv = b.label == 255
            if inv.any():
                assert not b.pre_stack()[:, inv].any()
                assert not b.post_stack()[:, inv].any()
        # the corpus as a whole exercises background, intact and damaged
        assert {0, 1, 2} <= seen

    def test_deterministic_bytes(self, tmp_path):
        make_synthetic_event(tmp_path / "a", n_patches=4, patch_size=32, seed=9)
        make_synthetic_event(tmp_path / "b", n_patches=4, patch_size=32, seed=9)
        names = sorted(p.name for p in (tmp_path / "a" / "bundles").iterdir())
        assert len(names) == 4
        for name in names:
            assert (tmp_path / "a" / "bundles" / name).read_bytes() == \
                   (tmp_path / "b" / "bundles" / name).read_bytes()
        assert (tmp_path / "a" / "splits.csv").read_text() == \
               (tmp_path / "b" / "splits.csv").read_text()

    def test_damage_shift_matches_signature(self, tmp_path):
        """Damaged pixels' bi-temporal shift follows the damage signature.

        Per patch: channelwise mean(post - pre) over damaged minus the same
        over intact pixels. Gain jitter and terrain hit both classes alike,
        so the difference should track the generator's damage vector.
        """
        from damagemap.synth import _S1_DAMAGE, _S2_DAMAGE

        split = make_synthetic_event(tmp_path, n_patches=6, patch_size=64, seed=2)
        signature = np.concatenate([_S1_DAMAGE, _S2_DAMAGE])
        contrasts = []
        for pid in split.assignments:
            b = read_bundle(tmp_path / "bundles" / f"{pid}.bundle")
            dmg = b.label == 2
            intact = b.label == 1
            if dmg.sum() >= 30 and intact.sum() >= 30:
                delta = b.post_stack() - b.pre_stack()
                contrasts.append(delta[:, dmg].mean(axis=1)
                                 - delta[:, intact].mean(axis=1))
        assert contrasts, "no patch with both classes; adjust the seed"
        observed = np.mean(contrasts, axis=0)
        corr = np.corrcoef(observed, signature)[0, 1]
        assert corr > 0.9


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    return make_demo_inputs(out, seed=0), out


class TestDemoInputs:
    def test_files_exist(self, demo):
        paths, _ = demo
        for key in ("catalog", "gcps", "polygons", "build_manifest", "splits"):
            assert paths[key].exists(), key
        assert paths["rasters"].is_dir()
        assert len(list(paths["rasters"].glob("*.npz"))) == 8

    def test_catalog_shape(self, demo):
        paths, _ = demo
        catalog = json.loads(paths["catalog"].read_text())
        assert catalog["schema_version"] == 1
        assert catalog["event"]["event_id"] == paths["event_id"]
        assert len(catalog["patches"]) == 4
        for patch in catalog["patches"]:
            ids = [c["scene_id"] for c in patch["candidates"]]
            assert len(ids) == 8
            platforms = {c["platform"] for c in patch["candidates"]}
            assert platforms == {"s1", "s2"}
            for c in patch["candidates"]:
                assert (paths["rasters"] / c["raster"]).exists()

    def test_scene_npz_contract(self, demo):
        paths, _ = demo
        with np.load(paths["rasters"] / "s2_pre_a.npz") as npz:
            assert npz["data"].dtype == np.float32
            assert npz["data"].shape[0] == 12
            assert len(npz["transform"]) == 6
        with np.load(paths["rasters"] / "s1_pre_a.npz") as npz:
            assert npz["data"].shape[0] == 2

    def test_build_manifest_covers_patches(self, demo):
        paths, _ = demo
        doc = json.loads(paths["build_manifest"].read_text())
        assert doc["schema_version"] == 1
        pids = sorted(e["patch_id"] for e in doc["patches"])
        assert pids == sorted(paths["patch_ids"])
        for e in doc["patches"]:
            assert e["west"] < e["east"]
            assert e["south"] < e["north"]

    def test_polygons_carry_both_grades(self, demo):
        paths, _ = demo
        doc = json.loads(paths["polygons"].read_text())
        grades = {f["properties"]["damage"] for f in doc["features"]}
        assert grades == {"no-damage", "destroyed"}

    def test_splits(self, demo):
        paths, _ = demo
        scheme = SplitScheme.from_csv(paths["splits"], name="xview2")
        assert len(scheme.patch_ids("train")) == 3
        assert len(scheme.patch_ids("test")) == 1

    def test_deterministic(self, tmp_path):
        a = make_demo_inputs(tmp_path / "a", seed=0)
        b = make_demo_inputs(tmp_path / "b", seed=0)
        assert a["catalog"].read_text() == b["catalog"].read_text()
        assert a["gcps"].read_text() == b["gcps"].read_text()
