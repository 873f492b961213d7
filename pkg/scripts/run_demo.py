#!/usr/bin/env python3
"""Stage the built-in demo inputs and drive the whole pipeline through the CLI.

Everything lands under one directory: staged inputs, a generated config, and
the outputs of georef -> select -> build -> train -> predict -> eval ->
render. Finishes in well under a minute and prints where each artifact went.

    python3 scripts/run_demo.py out/demo
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from damagemap.cli import main as cli_main
from damagemap.synth import make_demo_inputs


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("work_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=8)
    args = ap.parse_args()

    work = args.work_dir
    demo = make_demo_inputs(work / "inputs", seed=args.seed)
    out = work / "out"
    config = {
        "paths": {
            "catalog": str(demo["catalog"]),
            "gcps": str(demo["gcps"]),
            "polygons": str(demo["polygons"]),
            "build_manifest": str(demo["build_manifest"]),
            "rasters": str(demo["rasters"]),
            "splits": str(demo["splits"]),
            "transforms": str(out / "transforms.json"),
            "manifest": str(out / "manifest.json"),
            "bundles": str(out / "bundles"),
            "checkpoints": str(out / "ckpt"),
            "predictions": str(out / "pred"),
            "reports": str(out / "reports"),
        },
        "model": {"widths": [8, 12]},
        "optimizer": {"epochs": args.epochs, "warmup_epochs": 1,
                      "learning_rate": 1e-2},
        "train": {"batch_size": 2, "buffer": 1, "val_buffer": 0},
        "eval": {"buffers": [0, 1, 3]},
        "seeds": [args.seed],
    }
    config_path = work / "config.json"
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(json.dumps(config, indent=2))

    base = ["--config", str(config_path)]
    for command in ("georef", "select", "build", "train", "predict", "eval"):
        code = cli_main(base + [command])
        if code != 0:
            print(f"{command} failed with exit code {code}", file=sys.stderr)
            return code

    # render the first prediction for a quick visual check
    pred_manifest = json.loads((out / "pred" / "predictions.json").read_text())
    first = pred_manifest["patches"][0]
    code = cli_main(base + ["render", str(out / "pred" / f"{first}.npy"),
                            str(out / f"{first}.png")])
    if code != 0:
        return code

    report = json.loads((out / "reports" / "report.json").read_text())
    agg = report["aggregate"]
    print(f"config:  {config_path}")
    print(f"report:  {out / 'reports' / 'report.json'}")
    print(f"render:  {out / (first + '.png')}")
    print(f"f1_loc(B=3)={agg['loc']['3']['f1']}  "
          f"f1_dmg={agg['dmg']['f1_dmg']}  f1_comp(B=3)={agg['comp']['3']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
