#!/usr/bin/env python3
"""Desk-scale end-to-end run on the synthetic lesion fixture.

prepare -> train -> eval (with a threshold sweep) -> triage of ten test
images, all through the CLI. Takes roughly 15-20 s on one CPU core.

    python3 scripts/run_synthetic_experiment.py --out runs/synthetic
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from cnntriage.cli import main as cli


def run(args: list[str]) -> None:
    print("$ cnntriage " + " ".join(args), flush=True)
    code = cli(args)
    if code:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/synthetic")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--jobs", type=int, default=1)
    ns = parser.parse_args()

    out = Path(ns.out)
    cfg = str(out / "run_config.json")
    run(["prepare", "--synthetic", "--output-dir", str(out), "--seed", str(ns.seed),
         "--epochs", str(ns.epochs), "--jobs", str(ns.jobs)])
    run(["train", "--config", cfg])
    run(["eval", "--config", cfg, "--sweep", "1,3,5,7,9"])

    with open(out / "test.csv", newline="") as fh:
        ids = [row["image_id"] for row in csv.DictReader(fh)][:10]
    images = [str(out / "synthetic" / "images" / f"{i}.png") for i in ids]
    run(["triage", "--config", cfg, *images])

    result = json.loads((out / "eval.json").read_text())
    print(f"\ncritical acc {result['acc_critical']:.3f}, "
          f"non-critical acc {result['acc_noncritical']:.3f}; artifacts in {out}")


if __name__ == "__main__":
    main()
