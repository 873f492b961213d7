"""Verification gates.

Ten hard checks, one test each, covering the full contract at desk scale:
composite-score arithmetic against reported operating points, brute-force
metric equivalence, buffer semantics, georeference recovery, selection
scoring, gradient correctness, CLI training determinism, a synthetic
end-to-end disaster, ensembling identity, and bundle integrity. Every test
prints one "[gate NN] PASS" line with the measured quantities (visible
under -s); a violated bound fails the test like any other assertion.

Gates 7 and 8 are the expensive ones: a doubled CLI pipeline run and a
200-patch training run at full patch size with the reference settings.
"""

import json
import math
import time
from dataclasses import replace
from datetime import date

import numpy as np
import pytest

from damagemap.cli import main as cli_main
from damagemap.dataset import PatchBundle, SplitScheme, read_bundle, write_bundle
from damagemap.errors import DataError
from damagemap.georef import correct_source_image
from damagemap.metrics import (dmg_confusion, f1_comp, f1_dmg, f1_loc,
                               loc_confusion, per_event_report)
from damagemap.model import (FusionMode, ReferenceClassifier, TwoStepModel,
                             ensemble_predict, loss_and_gradients,
                             masked_cross_entropy, training_target)
from damagemap.raster import fit_norm_stats, normalize
from damagemap.scene_select import (SceneCandidate, SelectionPolicy,
                                    select_post_scene, temporal_score)
from damagemap.synth import (make_demo_inputs, make_georef_corpus,
                             make_synthetic_event, transform_error_tile_widths)
from damagemap.train import (Sample, TrainSettings, predict_map,
                             read_checkpoint, train_model, write_checkpoint)


def _gate(n: int, detail: str) -> None:
    print(f"[gate {n:02d}] PASS: {detail}")


# ---------------------------------------------------------------------------
# Gate 1: composite-score arithmetic against reported operating points.
#
# (label, f1_loc, f1_dmg, f1_comp) for the four reference configurations and
# four comparison systems, on both evaluation splits, at the buffered and the
# no-buffer localization setting. All values are reported rounded to three
# decimals, so the recomputed combination can legitimately differ from the
# reported composite by up to one unit in the third decimal
# (0.3*5e-4 + 0.7*5e-4 from the inputs plus 5e-4 from the output).

_OPERATING_POINTS = [
    # fixed split, buffered localization
    ("fixed two_step early", 0.584, 0.830, 0.756),
    ("fixed two_step late", 0.584, 0.826, 0.753),
    ("fixed joint early", 0.611, 0.830, 0.764),
    ("fixed joint late", 0.606, 0.826, 0.760),
    ("fixed comparison-a", 0.595, 0.831, 0.760),
    ("fixed comparison-b", 0.599, 0.792, 0.734),
    ("fixed comparison-c", 0.488, 0.816, 0.718),
    ("fixed comparison-d", 0.651, 0.863, 0.800),
    # fixed split, no buffer
    ("fixed two_step early B0", 0.904, 0.830, 0.852),
    ("fixed two_step late B0", 0.904, 0.826, 0.849),
    ("fixed joint early B0", 0.873, 0.830, 0.843),
    ("fixed joint late B0", 0.888, 0.826, 0.845),
    ("fixed comparison-a B0", 0.876, 0.831, 0.844),
    ("fixed comparison-b B0", 0.869, 0.792, 0.815),
    ("fixed comparison-c B0", 0.767, 0.816, 0.801),
    ("fixed comparison-d B0", 0.755, 0.863, 0.831),
    # event-based split, buffered localization
    ("event two_step early", 0.510, 0.771, 0.693),
    ("event two_step late", 0.510, 0.794, 0.709),
    ("event joint early", 0.491, 0.771, 0.687),
    ("event joint late", 0.455, 0.794, 0.692),
    ("event comparison-a", 0.444, 0.796, 0.690),
    ("event comparison-b", 0.358, 0.756, 0.636),
    ("event comparison-c", 0.432, 0.656, 0.589),
    ("event comparison-d", 0.362, 0.780, 0.655),
    # event-based split, no buffer
    ("event two_step early B0", 0.789, 0.771, 0.776),
    ("event two_step late B0", 0.789, 0.794, 0.793),
    ("event joint early B0", 0.662, 0.771, 0.738),
    ("event joint late B0", 0.622, 0.794, 0.743),
    ("event comparison-a B0", 0.609, 0.796, 0.740),
    ("event comparison-b B0", 0.419, 0.756, 0.655),
    ("event comparison-c B0", 0.615, 0.656, 0.644),
    ("event comparison-d B0", 0.402, 0.780, 0.667),
]


def test_01_composite_score_reproduces_operating_points():
    t0 = time.perf_counter()
    worst = 0.0
    for label, loc, dmg, comp in _OPERATING_POINTS:
        got = f1_comp(loc, dmg)
        err = abs(got - comp)
        worst = max(worst, err)
        assert err <= 1e-3 + 1e-9, (label, got, comp)
    # the two canonical rows land exactly on the reported rounding
    assert round(f1_comp(0.584, 0.826), 3) == 0.753
    assert round(f1_comp(0.904, 0.826), 3) == 0.849
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _gate(1, f"{len(_OPERATING_POINTS)} operating points, "
             f"worst |err|={worst:.2e}, {elapsed * 1e3:.1f} ms")


# ---------------------------------------------------------------------------
# Gate 2: metric equivalence against an independent brute-force tally.
#
# The oracle walks pixels in pure Python and never touches the library's
# dilation or masking helpers: ring membership is a literal Chebyshev
# neighborhood scan, counts are integer increments.


def _oracle_loc(truth, pred, buffer_px):
    h, w = len(truth), len(truth[0])
    bld = [[truth[y][x] in (1, 2) for x in range(w)] for y in range(h)]
    tp = fp = fn = tn = ring = invalid = 0
    for y in range(h):
        for x in range(w):
            if truth[y][x] == 255:
                invalid += 1
                continue
            is_b = bld[y][x]
            if buffer_px and not is_b:
                hit = False
                for yy in range(max(0, y - buffer_px), min(h, y + buffer_px + 1)):
                    for xx in range(max(0, x - buffer_px), min(w, x + buffer_px + 1)):
                        if bld[yy][xx]:
                            hit = True
                            break
                    if hit:
                        break
                if hit:
                    ring += 1
                    continue
            p_b = pred[y][x] in (1, 2)
            if p_b and is_b:
                tp += 1
            elif p_b:
                fp += 1
            elif is_b:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn, ring, invalid


def _oracle_dmg(truth, pred):
    h, w = len(truth), len(truth[0])
    counts = {1: [0, 0, 0, 0], 2: [0, 0, 0, 0]}  # tp fp fn tn
    domain = 0
    for y in range(h):
        for x in range(w):
            t = truth[y][x]
            if t not in (1, 2):
                continue
            domain += 1
            p = pred[y][x]
            for cls in (1, 2):
                tt, pp = t == cls, p == cls
                if tt and pp:
                    counts[cls][0] += 1
                elif pp:
                    counts[cls][1] += 1
                elif tt:
                    counts[cls][2] += 1
                else:
                    counts[cls][3] += 1
    return counts, domain


def _oracle_f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return None if denom == 0 else 2.0 * tp / denom


def _f1_close(a, b):
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= 1e-12


def test_02_f1_counts_match_brute_force_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    codes = np.array([0, 1, 2, 255], dtype=np.uint8)

    z = np.zeros((16, 16), np.uint8)
    scenes = [
        (z.copy(), z.copy()),
        (np.full((16, 16), 255, np.uint8), rng.integers(0, 3, (16, 16)).astype(np.uint8)),
        (np.full((16, 16), 1, np.uint8), np.full((16, 16), 2, np.uint8)),
        (z.copy(), np.full((16, 16), 1, np.uint8)),
    ]
    one = z.copy()
    one[8, 8] = 2
    scenes.append((one, z.copy()))
    border = z.copy()
    border[0, :] = 1
    border[:, 15] = 2
    scenes.append((border, border.copy()))

    while len(scenes) < 1000:
        probs = rng.dirichlet(np.full(4, 0.7))
        truth = rng.choice(codes, size=(16, 16), p=probs)
        if len(scenes) % 2:
            pred = rng.integers(0, 3, (16, 16)).astype(np.uint8)
        else:
            pred = truth.copy()
            pred[truth == 255] = rng.integers(0, 3, int((truth == 255).sum()))
            flips = rng.random((16, 16)) < 0.15
            pred[flips] = rng.integers(0, 3, int(flips.sum()))
        scenes.append((truth, pred))

    for truth, pred in scenes:
        t_list, p_list = truth.tolist(), pred.tolist()
        for b in (0, 3):
            cc, ign, inv = loc_confusion(pred, truth, b)
            otp, ofp, ofn, otn, oring, oinv = _oracle_loc(t_list, p_list, b)
            assert (cc.tp, cc.fp, cc.fn, cc.tn) == (otp, ofp, ofn, otn)
            assert (ign, inv) == (oring, oinv)
            assert _f1_close(cc.f1(), _oracle_f1(otp, ofp, ofn))
        cc_i, cc_d, domain = dmg_confusion(pred, truth)
        ocounts, odomain = _oracle_dmg(t_list, p_list)
        assert domain == odomain
        for cls, cc in ((1, cc_i), (2, cc_d)):
            otp, ofp, ofn, otn = ocounts[cls]
            assert (cc.tp, cc.fp, cc.fn, cc.tn) == (otp, ofp, ofn, otn)
            assert _f1_close(cc.f1(), _oracle_f1(otp, ofp, ofn))

    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _gate(2, f"{len(scenes)} scenes, loc B in (0, 3) plus dmg, "
             f"all counts bitwise equal, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# Gate 3: the buffer forgives footprint inflation by one pixel.


def test_03_buffer_forgives_one_pixel_inflation():
    truth = np.zeros((24, 24), np.uint8)
    truth[4:10, 4:10] = 1
    truth[14:20, 13:19] = 2
    # inflate each footprint by one pixel, keeping the class
    pred = truth.copy()
    for y in range(24):
        for x in range(24):
            if truth[y, x] == 0:
                neigh = truth[max(0, y - 1):y + 2, max(0, x - 1):x + 2]
                vals = neigh[neigh > 0]
                if vals.size:
                    pred[y, x] = vals[0]
    assert int((pred > 0).sum()) > int((truth > 0).sum())

    assert f1_loc(pred, truth, 3) == 1.0
    strict = f1_loc(pred, truth, 0)
    assert strict is not None and strict < 1.0

    base = f1_dmg(pred, truth)
    assert base == (1.0, 1.0, 1.0)
    scheme = SplitScheme(name="xview2", assignments={"p0": ("ev", "test")})
    dmg_scores = []
    for b in range(6):
        rep = per_event_report({"p0": pred}, {"p0": truth}, scheme, buffers=(b,))
        dmg_scores.append(rep.aggregate["dmg"]["f1_dmg"])
    assert dmg_scores == [base[2]] * 6

    rep = per_event_report({"p0": pred}, {"p0": truth}, scheme, buffers=(0, 3))
    assert rep.aggregate["loc"]["3"]["f1"] == 1.0
    assert rep.aggregate["loc"]["0"]["f1"] == strict
    _gate(3, f"f1_loc(B=3)=1.0, f1_loc(B=0)={strict:.4f}, "
             f"f1_dmg constant at {base[2]} over B=0..5")


# ---------------------------------------------------------------------------
# Gate 4: georeference recovery with corrupted tiles in the pool.


def test_04_georef_recovery_under_corrupted_tiles():
    t0 = time.perf_counter()
    tiles, true_transform = make_georef_corpus(
        n_tiles=40, corrupt_fraction=0.2, seed=7)
    fitted, stats = correct_source_image(tiles)
    err = transform_error_tile_widths(fitted, true_transform)
    elapsed = time.perf_counter() - t0

    assert stats["n_tiles"] == 40
    assert stats["n_tiles_fitted"] == 40  # corrupt tiles still fit, then lose the vote
    assert stats["residual_max"] > 1e-4   # the corruption is visible in the residuals
    assert err < 1e-6
    assert elapsed < 5.0
    _gate(4, f"max corner error {err:.2e} tile-widths over 40 tiles "
             f"(8 corrupt), {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# Gate 5: post-event scene selection formula, worked example included.


def test_05_post_scene_selection_worked_example():
    policy = SelectionPolicy()
    assert (policy.cloud_weight, policy.temporal_weight) == (0.4, 0.6)
    assert policy.cs_threshold == 0.5

    assert temporal_score(0) == 1.0
    assert abs(temporal_score(1) - 1 / math.sqrt(2)) < 1e-15
    assert temporal_score(3) == 0.5

    c0 = SceneCandidate("post_0", "s2", date(2020, 6, 3), cloud_score=0.6)
    c1 = SceneCandidate("post_1", "s2", date(2020, 6, 9), cloud_score=0.7)

    # direct evaluation of the scoring formula
    s0 = policy.cloud_weight * 0.6 + policy.temporal_weight * temporal_score(0)
    s1 = policy.cloud_weight * 0.7 + policy.temporal_weight * temporal_score(1)
    assert abs(s0 - 0.84) <= 5e-5
    assert abs(s1 - 0.7043) <= 5e-5
    assert s0 > s1

    chosen, fallback = select_post_scene([c1, c0], policy)  # input order must not matter
    assert chosen.scene_id == "post_0" and not fallback

    # threshold is strict: at 0.6 the clearer-but-later scene is the only one eligible
    chosen2, fallback2 = select_post_scene([c0, c1], replace(policy, cs_threshold=0.6))
    assert chosen2.scene_id == "post_1" and not fallback2

    # nothing eligible: constraint dropped, flag raised, score contest unchanged
    chosen3, fallback3 = select_post_scene([c0, c1], replace(policy, cs_threshold=0.9))
    assert chosen3.scene_id == "post_0" and fallback3

    _gate(5, f"scores {s0:.4f} vs {s1:.4f}, index 0 wins; threshold and "
             f"fallback branches verified")


# ---------------------------------------------------------------------------
# Gate 6: analytic gradients against central finite differences, 64-bit.


def _max_rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-10)
    return np.abs(analytic - numeric).max() / scale


def _screened_instance(seed, fusion, head):
    """Random tiny problem whose ReLU pre-activations keep a safe margin.

    Finite differences are only a trustworthy oracle away from the kinks;
    the screen rejects draws where a 1e-6 step could cross one.
    """
    rng = np.random.default_rng(seed)
    n_classes = 3 if head == "joint" else 2
    for _ in range(200):
        model = ReferenceClassifier(
            in_channels=3, n_classes=n_classes, fusion=fusion,
            widths=(3, 4), seed=int(rng.integers(1 << 31)), dtype=np.float64)
        pre = rng.normal(size=(1, 3, 5, 5))
        post = rng.normal(size=(1, 3, 5, 5))
        label = rng.choice([0, 1, 2, 255], size=(1, 5, 5),
                           p=[0.4, 0.25, 0.25, 0.1]).astype(np.uint8)
        target, valid = training_target(label, head, buffer_radius=1)
        if valid.sum() == 0:
            continue
        _, cache = model.forward(pre, post, want_cache=True)
        margin = min(min(np.abs(b["z1"]).min(), np.abs(b["z2"]).min())
                     for b in cache["branches"])
        if margin > 1e-4:
            return model, pre, post, target, valid
    raise AssertionError("no numerically safe instance found")


def test_06_gradients_match_finite_differences():
    t0 = time.perf_counter()
    eps = 1e-6
    worst = 0.0
    for i in range(20):
        fusion = FusionMode.EARLY if i % 2 == 0 else FusionMode.LATE
        head = ("joint", "loc", "dmg")[i % 3]
        model, pre, post, target, valid = _screened_instance(1000 + i, fusion, head)
        _, grads, n_valid = loss_and_gradients(model, pre, post, target, valid)
        assert n_valid > 0
        for key, p in model.params.items():
            num = np.zeros_like(p)
            for j in range(p.size):
                orig = p.flat[j]
                p.flat[j] = orig + eps
                lp, _, _ = masked_cross_entropy(model.forward(pre, post), target, valid)
                p.flat[j] = orig - eps
                lm, _, _ = masked_cross_entropy(model.forward(pre, post), target, valid)
                p.flat[j] = orig
                num.flat[j] = (lp - lm) / (2 * eps)
            rel = _max_rel_err(grads[key], num)
            worst = max(worst, rel)
            assert rel < 1e-4, (i, fusion, head, key, rel)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _gate(6, f"20 instances (both fusion modes, all heads), "
             f"worst rel err {worst:.2e}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# Gate 7: CLI training determinism, checkpoint and report bytes.


def test_07_training_cli_is_bit_deterministic(tmp_path):
    demo = make_demo_inputs(tmp_path / "demo", seed=0)
    shared = tmp_path / "shared"
    base_paths = {
        "catalog": str(demo["catalog"]),
        "gcps": str(demo["gcps"]),
        "polygons": str(demo["polygons"]),
        "build_manifest": str(demo["build_manifest"]),
        "rasters": str(demo["rasters"]),
        "splits": str(demo["splits"]),
        "transforms": str(shared / "transforms.json"),
        "manifest": str(shared / "manifest.json"),
        "bundles": str(shared / "bundles"),
    }

    def make_config(run_dir):
        run_dir.mkdir(parents=True, exist_ok=True)
        obj = {
            "paths": dict(base_paths,
                          checkpoints=str(run_dir / "ckpt"),
                          predictions=str(run_dir / "pred"),
                          reports=str(run_dir / "reports")),
            "model": {"widths": [4, 6]},
            "optimizer": {"epochs": 4, "warmup_epochs": 1, "learning_rate": 1e-2},
            "train": {"batch_size": 2, "buffer": 1, "val_buffer": 0},
            "eval": {"buffers": [0, 1]},
            "seeds": [0],
        }
        path = run_dir / "config.json"
        path.write_text(json.dumps(obj, indent=2))
        return path

    cfg_a = make_config(tmp_path / "run_a")
    cfg_b = make_config(tmp_path / "run_b")
    for command in ("georef", "select", "build"):
        assert cli_main(["--config", str(cfg_a), command]) == 0, command

    artifacts = {}
    for name, cfg in (("a", cfg_a), ("b", cfg_b)):
        for command in ("train", "predict", "eval"):
            assert cli_main(["--config", str(cfg), command]) == 0, (name, command)
        run_dir = cfg.parent
        got = {
            "ckpt": (run_dir / "ckpt" / "model_seed0.ckpt").read_bytes(),
            "norm": (run_dir / "ckpt" / "norm_stats.json").read_bytes(),
            "report.json": (run_dir / "reports" / "report.json").read_bytes(),
            "report.csv": (run_dir / "reports" / "report.csv").read_bytes(),
        }
        for p in sorted((run_dir / "pred").iterdir()):
            got[f"pred/{p.name}"] = p.read_bytes()
        artifacts[name] = got

    assert artifacts["a"].keys() == artifacts["b"].keys()
    for key in artifacts["a"]:
        assert artifacts["a"][key] == artifacts["b"][key], key
    _gate(7, f"two train/predict/eval runs, {len(artifacts['a'])} artifacts "
             f"byte-identical (checkpoint {len(artifacts['a']['ckpt'])} bytes)")


# ---------------------------------------------------------------------------
# Gate 8: synthetic disaster end to end with the reference settings.


@pytest.mark.slow
def test_08_synthetic_disaster_end_to_end(tmp_path):
    t0 = time.perf_counter()
    scheme = make_synthetic_event(tmp_path, n_patches=200, patch_size=128, seed=11)
    train_ids = scheme.patch_ids("train")
    test_ids = scheme.patch_ids("test")
    assert len(train_ids) == 160 and len(test_ids) == 40

    bundles = tmp_path / "bundles"
    train_b = [read_bundle(bundles / f"{pid}.bundle") for pid in train_ids]
    test_b = [read_bundle(bundles / f"{pid}.bundle") for pid in test_ids]
    stats = fit_norm_stats(
        [b.pre_stack() for b in train_b] + [b.post_stack() for b in train_b],
        [b.label != 255 for b in train_b] * 2)

    def to_sample(b):
        return Sample(normalize(b.pre_stack(), stats),
                      normalize(b.post_stack(), stats), b.label, b.patch_id)

    train_s = [to_sample(b) for b in train_b]
    del train_b
    test_s = [to_sample(b) for b in test_b]
    del test_b

    model, _ = train_model(train_s, [], TrainSettings(), seed=0)
    preds = {s.patch_id: predict_map(model, s) for s in test_s}
    rep = per_event_report(preds, {s.patch_id: s.label for s in test_s},
                           scheme, buffers=(0, 3))
    agg = rep.aggregate
    f1d = agg["dmg"]["f1_dmg"]
    f1l = agg["loc"]["3"]["f1"]
    elapsed = time.perf_counter() - t0

    assert f1d is not None and f1d >= 0.90
    assert f1l is not None and f1l >= 0.85
    assert elapsed < 600.0
    _gate(8, f"held-out 40/200: f1_dmg={f1d:.4f} (>=0.90), "
             f"f1_loc(B=3)={f1l:.4f} (>=0.85), {elapsed:.0f} s (<600)")


# ---------------------------------------------------------------------------
# Gate 9: an ensemble of identical members is the identity.


def test_09_ensemble_of_identical_members_is_identity(tmp_path):
    rng = np.random.default_rng(5)
    pre = rng.normal(size=(14, 48, 48)).astype(np.float32)
    post = rng.normal(size=(14, 48, 48)).astype(np.float32)

    joint = ReferenceClassifier(in_channels=14, n_classes=3,
                                fusion=FusionMode.EARLY, widths=(8, 12), seed=3)
    path = tmp_path / "joint.ckpt"
    write_checkpoint(path, joint)
    members = [read_checkpoint(path)[0] for _ in range(3)]
    single = ensemble_predict(members[:1], pre, post)
    trio = ensemble_predict(members, pre, post)
    assert single.dtype == np.uint8
    assert np.array_equal(single, trio)
    assert np.array_equal(single, ensemble_predict([joint], pre, post))

    two = TwoStepModel(
        loc=ReferenceClassifier(in_channels=14, n_classes=2,
                                fusion=FusionMode.LATE, widths=(8, 12), seed=4),
        dmg=ReferenceClassifier(in_channels=14, n_classes=2,
                                fusion=FusionMode.LATE, widths=(8, 12), seed=9),
        tau_loc=0.5, tau_dmg=0.5)
    path2 = tmp_path / "two_step.ckpt"
    write_checkpoint(path2, two)
    members2 = [read_checkpoint(path2)[0] for _ in range(3)]
    single2 = ensemble_predict(members2[:1], pre, post)
    trio2 = ensemble_predict(members2, pre, post)
    assert np.array_equal(single2, trio2)

    classes = {int(v) for v in np.unique(single)} | {int(v) for v in np.unique(single2)}
    _gate(9, f"joint and two-step trios match their single member bitwise "
             f"(classes seen: {sorted(classes)})")


# ---------------------------------------------------------------------------
# Gate 10: bundle round-trip and corruption detection.


def _random_bundle(rng, i):
    h = int(rng.integers(8, 21))
    w = int(rng.integers(8, 21))
    c1 = int(rng.integers(1, 4))
    c2 = int(rng.integers(1, 13))
    meta = {"index": i, "tags": ["synthetic", f"run{i % 3}"]} if i % 2 else {}
    return PatchBundle(
        patch_id=f"p{i:03d}",
        event_id=f"ev{i % 5}",
        s1_pre=rng.normal(size=(c1, h, w)).astype(np.float32),
        s1_post=rng.normal(size=(c1, h, w)).astype(np.float32),
        s2_pre=rng.normal(size=(c2, h, w)).astype(np.float32),
        s2_post=rng.normal(size=(c2, h, w)).astype(np.float32),
        label=rng.choice(np.array([0, 1, 2, 255], dtype=np.uint8), size=(h, w)),
        meta=meta,
    )


def test_10_bundle_round_trip_and_corruption_detection(tmp_path):
    rng = np.random.default_rng(99)
    arrays = ("s1_pre", "s1_post", "s2_pre", "s2_post", "label")
    flips_detected = 0
    for i in range(100):
        bundle = _random_bundle(rng, i)
        path = tmp_path / f"{i:03d}.bundle"
        write_bundle(bundle, path)
        back = read_bundle(path)
        for name in arrays:
            a, b = getattr(bundle, name), getattr(back, name)
            assert a.shape == b.shape and a.dtype == b.dtype
            assert a.tobytes() == b.tobytes(), name
        assert back.patch_id == bundle.patch_id
        assert back.event_id == bundle.event_id
        assert back.meta == bundle.meta

        raw = bytearray(path.read_bytes())
        pos = int(rng.integers(0, len(raw)))
        raw[pos] ^= int(rng.integers(1, 256))
        bad = tmp_path / "flip.bundle"
        bad.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            read_bundle(bad)
        flips_detected += 1
    assert flips_detected == 100

    # one flip per structural region: magic, version, header padding, the
    # metadata length field, its CRC, its payload, and the final array byte
    path = tmp_path / "000.bundle"
    raw = path.read_bytes()
    for pos in (0, 8, 20, 64, 72, 76, len(raw) - 1):
        bad_raw = bytearray(raw)
        bad_raw[pos] ^= 0xFF
        bad = tmp_path / "region.bundle"
        bad.write_bytes(bytes(bad_raw))
        with pytest.raises(DataError):
            read_bundle(bad)

    _gate(10, f"100 round-trips bit-exact, {flips_detected}/100 random "
              f"single-byte flips detected plus 7 region-targeted flips")
