"""Offline reproduction runs on the two public datasets.

Not part of CI: these need the full logs converted to the package's CSV
layout (schema.json, interactions.csv, optional feature CSVs) and hours of
CPU time. The script writes one run.json per (dataset, seed) with the
reference hyperparameters and split boundaries, then shells out to the CLI.

    python3 repro/run_benchmarks.py kuairand /data/kuairand --seeds 0 1 2 3 4
    python3 repro/run_benchmarks.py alimama /data/alimama --dry-run
"""

import argparse
import calendar
import json
import subprocess
import sys
from pathlib import Path

from perscen.config import RunConfig, TrainConfig


def end_of_day(date: str) -> int:
    """Unix seconds of the last second of a UTC date (YYYY-MM-DD)."""
    y, m, d = (int(p) for p in date.split("-"))
    return calendar.timegm((y, m, d, 23, 59, 59, 0, 0, 0))


DATASETS = {
    # train through the first date, validate through the second, test after
    "kuairand": {"train_end": "2022-04-21", "valid_end": "2022-04-28", "epochs": 50},
    "alimama": {"train_end": "2017-05-11", "valid_end": "2017-05-12", "epochs": 20},
}

ABLATIONS = ["", "--no-gnn", "--shared-graph", "--no-spec-sequence", "--no-vq", "--no-glu"]


def write_run(dataset: str, data_dir: Path, out_dir: Path, seed: int) -> Path:
    info = DATASETS[dataset]
    train = TrainConfig.preset(dataset, seed=seed, epochs=info["epochs"])
    optional = {name: str(data_dir / f"{name}.csv") for name in ("user_features", "item_features")
                if (data_dir / f"{name}.csv").exists()}
    run = RunConfig(
        workdir=str(out_dir),
        schema=str(data_dir / "schema.json"),
        interactions=str(data_dir / "interactions.csv"),
        dataset=dataset,
        train_end=end_of_day(info["train_end"]),
        valid_end=end_of_day(info["valid_end"]),
        train=train,
        **optional,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run.json"
    run.dump(path)
    return path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dataset", choices=sorted(DATASETS))
    ap.add_argument("data_dir", type=Path)
    ap.add_argument("--out", type=Path, default=Path("repro_runs"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--ablations", action="store_true", help="also run every ablation switch")
    ap.add_argument("--dry-run", action="store_true", help="write configs and print commands only")
    args = ap.parse_args()

    variants = ABLATIONS if args.ablations else [""]
    for seed in args.seeds:
        for flag in variants:
            tag = flag.lstrip("-") or "full"
            out = args.out / args.dataset / tag / f"seed{seed}"
            cfg = write_run(args.dataset, args.data_dir, out, seed)
            for cmd in ("train", "evaluate"):
                argv = [sys.executable, "-m", "perscen", cmd, "--config", str(cfg)] + ([flag] if flag else [])
                print(" ".join(argv))
                if not args.dry_run:
                    subprocess.run(argv, check=True)
    if not args.dry_run:
        summary = {}
        for report in sorted(args.out.glob(f"{args.dataset}/*/seed*/eval_report.json")):
            summary[str(report.parent.relative_to(args.out))] = json.loads(report.read_text())["scenarios"]
        (args.out / f"{args.dataset}_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
