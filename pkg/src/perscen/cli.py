"""Command-line entry point.

Every command reads one JSON run config (``--config``); flags override it.
Relative paths in the config resolve against the config file's directory.
Outputs go to the workdir:

    prepared.npz        prepare
    checkpoint/         train (params.bin + manifest.json)
    train_log.jsonl     train
    eval_report.json    evaluate
    index/<scenario>/   evaluate --write-index
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATIONS, ConfigError, RunConfig
from .data import PreparedData, prepare_from_files
from .model import Perscen
from .retrieval import build_index, evaluate, inner_product_scores, retrieve_topk, save_index, seen_items
from .schema import DataError, SchemaError
from .synthetic import SyntheticSpec, generate_synthetic, write_synthetic
from .training import TrainingDiverged, jsonl_logger, train

log = logging.getLogger("perscen")

CHECKPOINT_DIR = "checkpoint"
PREPARED_FILE = "prepared.npz"
REPORT_FILE = "eval_report.json"


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


# -- config ----------------------------------------------------------------------


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise UsageError(f"config file {cfg_path} does not exist", "config")
        run = RunConfig.load(cfg_path)
        base = cfg_path.parent
        run = replace(
            run,
            workdir=_resolve(base, run.workdir),
            schema=_resolve(base, run.schema),
            interactions=_resolve(base, run.interactions),
            user_features=_resolve(base, run.user_features),
            item_features=_resolve(base, run.item_features),
        )
    else:
        run = RunConfig()
    train_over = {}
    if args.seed is not None:
        train_over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    for flag in ABLATIONS:
        if getattr(args, flag, False):
            train_over[flag] = True
    if train_over:
        run = replace(run, train=replace(run.train, **train_over))
        run.train.validate()
    if args.workdir:
        run = replace(run, workdir=args.workdir)
    if args.filter_seen:
        run = replace(run, filter_seen=True)
    return run


def _require_inputs(run: RunConfig) -> None:
    for name in ("schema", "interactions"):
        value = getattr(run, name)
        if value is None:
            raise UsageError(f"config field '{name}' is not set", name)
        if not Path(value).exists():
            raise UsageError(f"config field '{name}' points to missing file {value}", name)
    for name in ("user_features", "item_features"):
        value = getattr(run, name)
        if value is not None and not Path(value).exists():
            raise UsageError(f"config field '{name}' points to missing file {value}", name)
    for name in ("train_end", "valid_end"):
        if getattr(run, name) is None:
            raise UsageError(f"config field '{name}' is not set", name)


def load_data(run: RunConfig) -> PreparedData:
    _require_inputs(run)
    return prepare_from_files(
        run.schema, run.interactions, run.train_end, run.valid_end,
        run.user_features, run.item_features, run.train.max_len, run.train.min_interactions,
    )


def _workdir(run: RunConfig) -> Path:
    w = Path(run.workdir)
    w.mkdir(parents=True, exist_ok=True)
    return w


def _load_model(run: RunConfig) -> Perscen:
    ckpt = Path(run.workdir) / CHECKPOINT_DIR
    if not (ckpt / "manifest.json").exists():
        raise UsageError(f"no checkpoint in {ckpt}; run 'train' first", "checkpoint")
    # the checkpoint's own config wins over flags for the architecture
    return load_checkpoint(ckpt)


# -- commands --------------------------------------------------------------------


def cmd_prepare(args, run: RunConfig) -> int:
    data = load_data(run)
    w = _workdir(run)
    data.save(w / PREPARED_FILE)
    run.dump(w / "run.json")
    s = data.splits
    print(json.dumps({"train": len(s.train), "valid": len(s.valid), "test": len(s.test),
                      "kept_users": int(data.sequences.kept.sum())}))
    return 0


def cmd_train(args, run: RunConfig) -> int:
    data = load_data(run)
    w = _workdir(run)
    model = Perscen(data.schema, run.train)
    logger = jsonl_logger(w / "train_log.jsonl")
    try:
        result = train(model, data, run.train, log_fn=logger)
    finally:
        logger.close()
    save_checkpoint(model, w / CHECKPOINT_DIR,
                    extra={"run": run.to_dict(), "best_epoch": result.best_epoch, "best_valid": result.best_valid})
    print(json.dumps({"checkpoint": str(w / CHECKPOINT_DIR), "best_epoch": result.best_epoch,
                      "best_valid": result.best_valid, "params": model.parameter_count()}))
    return 0


def cmd_evaluate(args, run: RunConfig) -> int:
    model = _load_model(run)
    data = load_data(run)
    split = getattr(data.splits, args.split)
    report = evaluate(model, data, split, run.train.eval_ks, filter_seen=run.filter_seen, dataset=run.dataset)
    report.extra["split"] = args.split
    report.extra["config"] = run.to_dict()
    w = _workdir(run)
    report.write(w / REPORT_FILE)
    if args.write_index:
        for s in range(data.schema.n_scenarios):
            save_index(build_index(model, data, s), w / "index" / str(s))
    sys.stdout.write(report.to_json())
    return 0


def cmd_retrieve(args, run: RunConfig) -> int:
    model = _load_model(run)
    data = load_data(run)
    if not 0 <= args.user < data.schema.n_users:
        raise UsageError(f"user {args.user} out of range", "user")
    if not 0 <= args.scenario < data.schema.n_scenarios:
        raise UsageError(f"scenario {args.scenario} out of range", "scenario")
    index = build_index(model, data, args.scenario)
    e_u = model.users(data, [args.user], args.scenario).embedding.data[0]
    exclude = None
    if run.filter_seen:
        exclude = [seen_items(data.splits.train).get(args.user, np.zeros(0, dtype=np.int64))]
    top = retrieve_topk(e_u[None, :], index, args.k, exclude=exclude)[0]
    scores = inner_product_scores(e_u, index.vectors)[0]
    pos = {int(i): n for n, i in enumerate(index.item_ids)}
    out = {"user_id": args.user, "scenario_id": args.scenario,
           "items": [int(i) for i in top], "scores": [float(scores[pos[int(i)]]) for i in top]}
    print(json.dumps(out))
    return 0


def cmd_dump_graph(args, run: RunConfig) -> int:
    model = _load_model(run)
    if model.config.no_gnn:
        raise UsageError("model was trained with no_gnn; there is no feature graph", "no_gnn")
    data = load_data(run)
    n = data.schema.n_users if args.entity == "user" else data.schema.n_items
    if not 0 <= args.id < n:
        raise UsageError(f"{args.entity} {args.id} out of range", "id")
    if args.entity == "user":
        out = model.users(data, [args.id], args.scenario)
    else:
        out = model.items(data, [args.id], args.scenario)
    mats = out.adjacency.raw if args.raw else out.adjacency.refined
    records = [{"entity": args.entity, "entity_id": args.id, "layer": l + 1, "matrix": m.data[0].tolist()}
               for l, m in enumerate(mats)]
    target = Path(args.out) if args.out else _workdir(run) / f"graph_{args.entity}_{args.id}.json"
    target.write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
    print(str(target))
    return 0


def cmd_dump_preferences(args, run: RunConfig) -> int:
    model = _load_model(run)
    data = load_data(run)
    users = np.arange(data.schema.n_users) if args.users is None else np.asarray(args.users, dtype=np.int64)
    scens = range(data.schema.n_scenarios) if args.scenario is None else [args.scenario]
    target = Path(args.out) if args.out else _workdir(run) / "preferences.jsonl"
    with open(target, "w", encoding="utf-8") as fh:
        for s in scens:
            p_hat = model.users(data, users, s).p_hat.data
            for u, vec in zip(users.tolist(), p_hat):
                fh.write(json.dumps({"user_id": u, "scenario_id": s, "p_hat": vec.tolist()}) + "\n")
    print(str(target))
    return 0


def cmd_synth(args, run: RunConfig) -> int:
    if not args.workdir:
        raise UsageError("synth needs --workdir for the output files", "workdir")
    spec = SyntheticSpec(
        n_users=args.n_users, n_items=args.n_items, n_scenarios=args.n_scenarios,
        n_user_clusters=args.n_clusters, scenario_shift_strength=args.shift,
        interactions_per_user=args.interactions_per_user, seed=args.seed or 0,
    )
    data = generate_synthetic(spec)
    write_synthetic(data, args.workdir, train=run.train)
    print(json.dumps({"directory": args.workdir, "interactions": len(data.log)}))
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "retrieve": cmd_retrieve,
    "dump-graph": cmd_dump_graph,
    "dump-preferences": cmd_dump_preferences,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--workdir", help="output directory (overrides config)")
    common.add_argument("--epochs", type=int, help="epoch budget (overrides config)")
    common.add_argument("--filter-seen", action="store_true", help="drop train-seen items from rankings")
    for flag in ABLATIONS:
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="perscen", description="Multi-scenario two-tower matching.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="split data and build sequences")
    sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="Recall/Hits@K per scenario")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--write-index", action="store_true", help="also write per-scenario item indexes")
    p = sub.add_parser("retrieve", parents=[common], help="top-K items for one (user, scenario)")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p = sub.add_parser("dump-graph", parents=[common], help="write refined feature-graph matrices")
    p.add_argument("--entity", choices=("user", "item"), default="user")
    p.add_argument("--id", type=int, default=0)
    p.add_argument("--scenario", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="unrefined A^(l) instead of refined")
    p.add_argument("--out")
    p = sub.add_parser("dump-preferences", parents=[common], help="write p_hat vectors as JSON lines")
    p.add_argument("--users", type=int, nargs="*")
    p.add_argument("--scenario", type=int)
    p.add_argument("--out")
    p = sub.add_parser("synth", parents=[common], help="write a planted-structure dataset")
    p.add_argument("--n-users", type=int, default=200)
    p.add_argument("--n-items", type=int, default=300)
    p.add_argument("--n-scenarios", type=int, default=3)
    p.add_argument("--n-clusters", type=int, default=2)
    p.add_argument("--shift", type=float, default=2.0)
    p.add_argument("--interactions-per-user", type=int, default=40)
    return parser


def _fail(code: int, kind: str, message: str, field_name: str | None = None) -> int:
    payload = {"error": kind, "message": message}
    if field_name:
        payload["field"] = field_name
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve_config(args)
        return COMMANDS[args.command](args, run)
    except UsageError as exc:
        return _fail(2, "usage", str(exc), exc.field_name)
    except ConfigError as exc:
        return _fail(2, "config", str(exc), exc.field_name)
    except CheckpointError as exc:
        return _fail(2, "checkpoint", str(exc))
    except (SchemaError, DataError) as exc:
        return _fail(2, "data", str(exc))
    except TrainingDiverged as exc:
        return _fail(1, "diverged", str(exc))


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
