"""Batch pipeline driver.

Subcommands mirror the pipeline stages: georef, select, build, train,
predict, ensemble, eval, render. Everything is driven by one JSON config
(--config); --seed overrides the configured seed list, --threads pins the
BLAS thread pools (why the numpy-heavy modules are imported only inside the
command functions, after the env vars are set).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, PipelineError

log = logging.getLogger(__name__)

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _configure_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    if "numpy" in sys.modules:
        log.warning("numpy already imported; --threads %d may not take effect", n)
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _load_config(args) -> "PipelineConfig":
    from .config import PipelineConfig

    if args.config is None:
        raise ConfigError("this command needs --config <path>")
    return PipelineConfig.load(args.config)


def _seeds(args, config) -> tuple[int, ...]:
    return (args.seed,) if args.seed is not None else config.seeds


# ---------------------------------------------------------------------------
# georef


def cmd_georef(args) -> int:
    from .georef import correct_source_image, load_gcp_jsonl
    from .util import write_json

    config = _load_config(args)
    (gcp_path,) = config.require_paths("gcps")
    sources = load_gcp_jsonl(gcp_path)
    if not sources:
        raise DataError(f"{gcp_path}: no GCP records")

    transforms: dict = {"schema_version": 1}
    residuals: dict = {"schema_version": 1}
    for source_id, tiles in sorted(sources.items()):
        if source_id == "schema_version":
            raise DataError("source_image_id 'schema_version' is reserved")
        fitted, stats = correct_source_image(tiles)
        transforms[source_id] = fitted.as_list()
        residuals[source_id] = stats
        log.info("georef %s: %d tiles, residual median %.3e, max %.3e",
                 source_id, stats["n_tiles"], stats["residual_median"],
                 stats["residual_max"])
    out = config.output_path("transforms")
    write_json(out, transforms)
    write_json(out.with_name(out.stem + ".residuals" + out.suffix), residuals)
    return 0


# ---------------------------------------------------------------------------
# select


def _parse_date(value, where: str):
    import datetime as dt

    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as e:
        raise DataError(f"{where}: bad date {value!r}: {e}") from e


def _candidate(entry: dict, where: str):
    from .scene_select import SceneCandidate

    known = {"scene_id", "platform", "date", "cloud_score", "orbit_path",
             "orbit_direction", "raster"}
    unknown = sorted(set(entry) - known)
    if unknown:
        raise DataError(f"{where}: unknown candidate keys {unknown}")
    for key in ("scene_id", "platform", "date"):
        if key not in entry:
            raise DataError(f"{where}: candidate missing {key!r}")
    return SceneCandidate(
        scene_id=str(entry["scene_id"]),
        platform=str(entry["platform"]),
        date=_parse_date(entry["date"], where),
        cloud_score=entry.get("cloud_score"),
        orbit_direction=entry.get("orbit_direction"),
        orbit_path=entry.get("orbit_path"),
    )


def cmd_select(args) -> int:
    import dataclasses

    from .scene_select import pair_s1_scenes, select_post_scene, select_pre_scene
    from .util import read_json, write_json

    config = _load_config(args)
    (catalog_path,) = config.require_paths("catalog")
    catalog = read_json(catalog_path)
    if catalog.get("schema_version") != 1:
        raise DataError(f"{catalog_path}: unsupported catalog schema_version")
    try:
        event_id = catalog["event"]["event_id"]
        event_date = _parse_date(catalog["event"]["event_date"], "catalog event")
        patches = catalog["patches"]
    except (KeyError, TypeError) as e:
        raise DataError(f"{catalog_path}: malformed catalog: {e}") from e

    policy = config.selection
    if args.cloud_threshold is not None:
        policy = dataclasses.replace(policy, cs_threshold=args.cloud_threshold)

    raster_of: dict[str, str] = {}
    rows = []
    failures = []
    for patch in patches:
        pid = patch.get("patch_id")
        if not pid:
            raise DataError(f"{catalog_path}: patch without patch_id")
        where = f"patch {pid}"
        try:
            cands = [_candidate(e, where) for e in patch.get("candidates", [])]
            for e in patch.get("candidates", []):
                if "raster" in e:
                    raster_of[e["scene_id"]] = e["raster"]
            s2 = [c for c in cands if c.platform == "s2"]
            s1 = [c for c in cands if c.platform == "s1"]
            s2_pre_pool = [c for c in s2 if c.date < event_date]
            s2_post_pool = [c for c in s2 if c.date >= event_date]
            s2_post, fallback = select_post_scene(s2_post_pool, policy)
            s2_pre = select_pre_scene(s2_pre_pool, policy)
            s1_pre, s1_post = pair_s1_scenes(
                [c for c in s1 if c.date < event_date],
                [c for c in s1 if c.date >= event_date],
                s2_pre.date, s2_post.date, policy,
            )
        except PipelineError as e:
            failures.append(f"{pid}: {e}")
            log.error("select %s: %s", pid, e)
            continue
        rows.append({
            "patch_id": pid,
            "s2_pre": {"scene_id": s2_pre.scene_id,
                       "date": s2_pre.date.isoformat(),
                       "raster": raster_of.get(s2_pre.scene_id)},
            "s2_post": {"scene_id": s2_post.scene_id,
                        "date": s2_post.date.isoformat(),
                        "raster": raster_of.get(s2_post.scene_id)},
            "s1_pre": {"scene_id": s1_pre.scene_id,
                       "date": s1_pre.date.isoformat(),
                       "raster": raster_of.get(s1_pre.scene_id)},
            "s1_post": {"scene_id": s1_post.scene_id,
                        "date": s1_post.date.isoformat(),
                        "raster": raster_of.get(s1_post.scene_id)},
            "cloud_fallback": fallback,
        })
    if failures:
        raise DataError(
            f"scene selection failed for {len(failures)} patch(es): "
            + "; ".join(failures)
        )

    manifest = {
        "schema_version": 1,
        "event": {"event_id": event_id, "event_date": event_date.isoformat()},
        "policy": policy.as_dict(),
        "patches": rows,
    }
    write_json(config.output_path("manifest"), manifest)
    log.info("select: %d patches -> %s", len(rows), config.paths.manifest)
    return 0


# ---------------------------------------------------------------------------
# build


def _load_scene_raster(path: Path, expect_channels: int, what: str):
    import numpy as np

    from .georef import AffineTransform2D
    from .raster import RasterGrid

    if not path.exists():
        raise DataError(f"{what}: missing raster {path}")
    with np.load(path) as npz:
        if "data" not in npz or "transform" not in npz:
            raise DataError(f"{what}: {path} needs 'data' and 'transform' entries")
        data = np.asarray(npz["data"], dtype=np.float32)
        transform = AffineTransform2D.from_list([float(v) for v in npz["transform"]])
        mask = np.asarray(npz["nodata_mask"], dtype=bool) if "nodata_mask" in npz else None
    if data.ndim != 3 or data.shape[0] != expect_channels:
        raise DataError(
            f"{what}: {path} has shape {data.shape}, expected ({expect_channels}, H, W)"
        )
    return RasterGrid(data=data, nodata_mask=mask, transform=transform)


def cmd_build(args) -> int:
    import numpy as np

    from .dataset import (
        S1_CHANNELS,
        S2_CHANNELS,
        SOURCE_UNCLASSIFIED,
        FootprintLabelSource,
        PatchBundle,
        build_invalid_mask,
        extract_patch,
        rasterize_labels,
        simplify_labels,
        write_bundle,
    )
    from .georef import AffineTransform2D, GeoRect
    from .util import read_json

    config = _load_config(args)
    manifest_path, build_path, polygons_path, rasters_dir = config.require_paths(
        "manifest", "build_manifest", "polygons", "rasters"
    )
    manifest = read_json(manifest_path)
    build_manifest = read_json(build_path)
    for doc, p in ((manifest, manifest_path), (build_manifest, build_path)):
        if doc.get("schema_version") != 1:
            raise DataError(f"{p}: unsupported schema_version")
    label_source = FootprintLabelSource.from_geojson_obj(read_json(polygons_path))
    scenes_by_patch = {row["patch_id"]: row for row in manifest["patches"]}
    patch_size = int(build_manifest.get("patch_size", 0))
    if patch_size < 8:
        raise DataError(f"{build_path}: patch_size must be >= 8")

    out_dir = config.output_path("bundles", directory=True)
    n_built = 0
    for entry in sorted(build_manifest["patches"], key=lambda e: e["patch_id"]):
        pid = entry["patch_id"]
        if pid not in scenes_by_patch:
            raise DataError(f"patch {pid}: not present in the scene manifest")
        scenes = scenes_by_patch[pid]
        rect = GeoRect(west=float(entry["west"]), south=float(entry["south"]),
                       east=float(entry["east"]), north=float(entry["north"]))

        grids = {}
        for role, channels in (("s1_pre", S1_CHANNELS), ("s1_post", S1_CHANNELS),
                               ("s2_pre", S2_CHANNELS), ("s2_post", S2_CHANNELS)):
            rel = scenes[role].get("raster")
            if not rel:
                raise DataError(f"patch {pid}: scene manifest has no raster for {role}")
            grid = _load_scene_raster(rasters_dir / rel, channels, f"patch {pid} {role}")
            grids[role] = extract_patch(grid, rect, (patch_size, patch_size))

        sx = (rect.east - rect.west) / patch_size
        sy = (rect.north - rect.south) / patch_size
        patch_transform = AffineTransform2D(a=sx, b=0.0, c=rect.west,
                                            d=0.0, e=-sy, f=rect.north)
        codes = rasterize_labels(label_source, patch_transform,
                                 (patch_size, patch_size))
        label = simplify_labels(codes)

        coverage_valid = None
        if entry.get("coverage") is not None:
            cw, cs_, ce, cn = (float(v) for v in entry["coverage"])
            jj, ii = np.meshgrid(np.arange(patch_size) + 0.5,
                                 np.arange(patch_size) + 0.5)
            centers = patch_transform.apply(
                np.stack([jj.ravel(), ii.ravel()], axis=1))
            lon = centers[:, 0].reshape(patch_size, patch_size)
            lat = centers[:, 1].reshape(patch_size, patch_size)
            coverage_valid = (lon >= cw) & (lon <= ce) & (lat >= cs_) & (lat <= cn)

        invalid = build_invalid_mask(
            (patch_size, patch_size),
            coverage_valid=coverage_valid,
            unclassified=codes == SOURCE_UNCLASSIFIED,
            nodata_masks=[g.nodata_mask for g in grids.values()
                          if g.nodata_mask is not None],
        )
        label = label.copy()
        label[invalid] = 255
        for g in grids.values():
            g.data[:, label == 255] = 0.0

        bundle = PatchBundle(
            patch_id=pid,
            event_id=str(entry.get("event_id", manifest["event"]["event_id"])),
            s1_pre=grids["s1_pre"].data, s1_post=grids["s1_post"].data,
            s2_pre=grids["s2_pre"].data, s2_post=grids["s2_post"].data,
            label=label,
            meta={"footprint": [rect.west, rect.south, rect.east, rect.north],
                  "scenes": {role: scenes[role]["scene_id"]
                             for role in ("s1_pre", "s1_post", "s2_pre", "s2_post")}},
        )
        write_bundle(bundle, out_dir / f"{pid}.bundle")
        n_built += 1
    log.info("build: wrote %d bundles to %s", n_built, out_dir)
    return 0


# ---------------------------------------------------------------------------
# train / predict / ensemble / eval


def _load_split_samples(config, split: str, stats=None):
    """Bundles of one split as normalized Samples (raw when stats is None)."""
    from .dataset import SplitScheme, read_bundle
    from .raster import normalize
    from .train import Sample

    bundles_dir, splits_path = config.require_paths("bundles", "splits")
    scheme = SplitScheme.from_csv(splits_path, name=config.split.scheme)
    out = []
    for pid in scheme.patch_ids(split):
        b = read_bundle(bundles_dir / f"{pid}.bundle")
        pre, post = b.pre_stack(), b.post_stack()
        if stats is not None:
            pre, post = normalize(pre, stats), normalize(post, stats)
        out.append(Sample(pre=pre, post=post, label=b.label, patch_id=pid))
    return scheme, out


def _checkpoint_path(config, seed: int) -> Path:
    (ckpt_dir,) = config.require_paths("checkpoints", exist=False)
    return Path(ckpt_dir) / f"model_seed{seed}.ckpt"


def _norm_stats_path(config) -> Path:
    (ckpt_dir,) = config.require_paths("checkpoints", exist=False)
    return Path(ckpt_dir) / "norm_stats.json"


def cmd_train(args) -> int:
    from .raster import fit_norm_stats
    from .train import train_model, write_checkpoint
    from .util import write_json

    config = _load_config(args)
    seed = _seeds(args, config)[0]

    _, raw_train = _load_split_samples(config, "train")
    if not raw_train:
        raise DataError("train split is empty")
    stats = fit_norm_stats(
        [s.pre for s in raw_train] + [s.post for s in raw_train],
        [s.label != 255 for s in raw_train] * 2,
    )
    _, train = _load_split_samples(config, "train", stats)
    _, val = _load_split_samples(config, "val", stats)

    settings = config.train_settings()
    model, history = train_model(train, val, settings, seed=seed)

    ckpt_dir = config.output_path("checkpoints", directory=True)
    meta = {
        "seed": seed,
        "heads": {name: {"selected_epoch": h["selected_epoch"],
                         "selected_score": h["selected_score"]}
                  for name, h in history.items()},
    }
    write_checkpoint(_checkpoint_path(config, seed), model, training_meta=meta)
    write_json(_norm_stats_path(config), stats.to_json_obj())
    write_json(ckpt_dir / f"history_seed{seed}.json",
               {"schema_version": 1, "seed": seed, "history": history})
    log.info("train: wrote %s", _checkpoint_path(config, seed))
    return 0


def _predict_with_seeds(args, seeds) -> int:
    import numpy as np

    from .model import ReferenceClassifier, TwoStepModel  # noqa: F401 (types)
    from .raster import NormStats
    from .train import read_checkpoint
    from .util import atomic_write_bytes, read_json, write_json

    config = _load_config(args)
    split = args.split or config.eval.split
    stats_obj = read_json(_norm_stats_path(config))
    stats = NormStats.from_json_obj(stats_obj)

    models = []
    for s in seeds:
        path = _checkpoint_path(config, s)
        if not path.exists():
            raise DataError(f"missing checkpoint {path} (seed {s})")
        model, _ = read_checkpoint(path)
        models.append(model)

    _, samples = _load_split_samples(config, split, stats)
    if not samples:
        raise DataError(f"split {split!r} has no patches")
    out_dir = config.output_path("predictions", directory=True)
    from .train import predict_map

    ids = []
    for sample in samples:
        pred = predict_map(models, sample)
        buf = io.BytesIO()
        np.save(buf, pred)
        atomic_write_bytes(out_dir / f"{sample.patch_id}.npy", buf.getvalue())
        ids.append(sample.patch_id)
    task = ("two_step" if models and hasattr(models[0], "loc") else "joint")
    write_json(out_dir / "predictions.json", {
        "schema_version": 1,
        "task": task,
        "split": split,
        "seeds": list(seeds),
        "patches": ids,
    })
    log.info("predict: %d maps (%d member(s)) -> %s", len(ids), len(models), out_dir)
    return 0


def cmd_predict(args) -> int:
    config = _load_config(args)
    return _predict_with_seeds(args, _seeds(args, config)[:1])


def cmd_ensemble(args) -> int:
    config = _load_config(args)
    return _predict_with_seeds(args, _seeds(args, config))


def cmd_eval(args) -> int:
    import numpy as np

    from .metrics import per_event_report
    from .util import atomic_write_text, read_json, write_json

    config = _load_config(args)
    split = args.split or config.eval.split
    (pred_dir,) = config.require_paths("predictions")

    pred_manifest = read_json(Path(pred_dir) / "predictions.json")
    if pred_manifest.get("schema_version") != 1:
        raise DataError(f"{pred_dir}/predictions.json: unsupported schema_version")

    scheme, samples = _load_split_samples(config, split)
    truths = {s.patch_id: s.label for s in samples}
    predictions = {}
    for pid in pred_manifest["patches"]:
        path = Path(pred_dir) / f"{pid}.npy"
        if not path.exists():
            raise DataError(f"{pred_dir}/predictions.json lists {pid} but {path} is missing")
        predictions[pid] = np.load(path)

    report = per_event_report(predictions, truths, scheme,
                              buffers=config.eval.buffers, eval_split=split)
    reports_dir = config.output_path("reports", directory=True)
    write_json(reports_dir / "report.json", report.to_json_obj())
    atomic_write_text(reports_dir / "report.csv", report.to_csv_text())
    agg = report.aggregate
    b = str(max(config.eval.buffers))
    log.info("eval: f1_loc[B=%s]=%s f1_dmg=%s f1_comp[B=%s]=%s -> %s",
             b, agg["loc"][b]["f1"], agg["dmg"]["f1_dmg"], b, agg["comp"][b],
             reports_dir)
    return 0


# ---------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    import numpy as np

    from .render import render_classmap

    in_path = Path(args.classmap)
    if not in_path.exists():
        raise DataError(f"missing class map {in_path}")
    try:
        values = np.load(in_path)
    except (ValueError, OSError) as e:
        raise DataError(f"{in_path}: not a readable .npy class map: {e}") from e
    render_classmap(values, args.out)
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="damagemap",
        description="Bi-temporal building-damage mapping pipeline.",
    )
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="override the configured seed list")
    parser.add_argument("--threads", type=int,
                        help="pin BLAS/OpenMP thread pools to N threads")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("georef", help="fit corrected transforms from GCPs").set_defaults(
        func=cmd_georef)

    p = sub.add_parser("select", help="pick scenes per patch")
    p.add_argument("--cloud-threshold", type=float,
                   help="override the policy's clear-sky threshold")
    p.set_defaults(func=cmd_select)

    sub.add_parser("build", help="resample scenes into labeled bundles").set_defaults(
        func=cmd_build)
    sub.add_parser("train", help="train the classifier").set_defaults(func=cmd_train)

    for name, fn in (("predict", cmd_predict), ("ensemble", cmd_ensemble),
                     ("eval", cmd_eval)):
        p = sub.add_parser(name)
        p.add_argument("--split", choices=("train", "val", "test"),
                       help="which split to run on (default: config eval.split)")
        p.set_defaults(func=fn)

    p = sub.add_parser("render", help="render a class-map .npy to PNG")
    p.add_argument("classmap")
    p.add_argument("out")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_threads(args.threads)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be >= 0", file=sys.stderr)
        return 2
    try:
        return int(args.func(args) or 0)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except json.JSONDecodeError as e:
        print(f"error: invalid JSON: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
