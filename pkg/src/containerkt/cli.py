"""Command-line entry point: ``containerkt <subcommand> ...``.

Every subcommand prints one JSON document to stdout (or writes it to
``--out`` for the commands whose output is a single file).  Failures print a
single-line JSON error object and exit with status 1; argparse usage errors
exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .events import (
    Metadata,
    ParseError,
    Schema,
    parse_events,
    parse_lectures,
    parse_questions,
)
from .features import (
    FeatureConfig,
    fit_standardization,
    handcrafted_layout,
    memory_columns,
    query_columns,
    user_features,
)
from .metrics import roc_auc
from .model import CheckpointError, load_checkpoint
from .plan import build_plan

log = logging.getLogger("containerkt")

CONFIG_SECTIONS = ("synth", "features", "model", "train")


# --------------------------------------------------------------------------- manifests


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """What produced an artifact.  The hash covers everything except file paths."""

    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    input_hashes: dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(cls, command: str, config: dict, seed: int | None, inputs: dict[str, Path] | None = None) -> "RunManifest":
        inputs = {k: str(v) for k, v in (inputs or {}).items()}
        hashes = {k: file_sha256(v) for k, v in inputs.items()}
        return cls(command, config, seed, inputs, {}, __version__, hashes)

    @property
    def hash(self) -> str:
        core = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "input_hashes": self.input_hashes,
        }
        return hashlib.sha256(_canonical(core).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {**asdict(self), "hash": self.hash}

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------- helpers


class CliError(Exception):
    pass


def load_config(path: str | None) -> dict:
    """Read a TOML or JSON config with optional ``synth``/``features``/``model``/``train`` tables."""
    if path is None:
        return {}
    p = Path(path)
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(p, "rb") as fh:
            cfg = tomllib.load(fh)
    elif p.suffix == ".json":
        cfg = json.loads(p.read_text())
    else:
        raise CliError(f"config {p} must be .toml or .json")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}; expected {list(CONFIG_SECTIONS)}")
    return cfg


def _section(cfg: dict, name: str, overrides: dict) -> dict:
    out = dict(cfg.get(name, {}))
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _data_paths(data_dir: str) -> dict[str, Path]:
    d = Path(data_dir)
    paths = {name: d / f"{name}.csv" for name in ("events", "questions", "lectures")}
    for name, p in paths.items():
        if not p.is_file():
            raise CliError(f"missing {name} file {p}")
    return paths


def load_dataset(data_dir: str, schema: str = "canonical"):
    paths = _data_paths(data_dir)
    with open(paths["questions"], newline="") as fh:
        questions = parse_questions(fh)
    with open(paths["lectures"], newline="") as fh:
        lectures = parse_lectures(fh)
    with open(paths["events"], "rb") as fh:
        histories = parse_events(fh, Schema(schema))
    n_tags = 1 + max([t for q in questions.values() for t in q.tags] + [lec.tag for lec in lectures.values()] + [0])
    return histories, Metadata(questions, lectures, n_tags), paths


def _read_column(path: str) -> list[float]:
    """Numbers from the last column of a CSV; a non-numeric first row is treated as a header."""
    values = []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                values.append(float(row[-1]))
            except ValueError:
                if k == 0:
                    continue
                raise CliError(f"{path}: row {k + 1} is not a number: {row[-1]!r}") from None
    return values


def _emit(result: dict, args) -> None:
    if getattr(args, "pretty", False):
        width = max((len(k) for k in result), default=0)
        for k, v in result.items():
            shown = v if isinstance(v, (str, int, float)) or v is None else json.dumps(v)
            print(f"{k:<{width}}  {shown}")
    else:
        print(json.dumps(result))


def _apply_threads():
    raw = os.environ.get("KT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"KT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"KT_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args, cfg) -> dict:
    from .synth import SynthConfig, generate, truth_auc, write_synth

    opts = _section(
        cfg,
        "synth",
        {
            "n_users": args.users,
            "n_questions": args.questions,
            "n_lectures": args.lectures,
            "n_tags": args.tags,
            "events_per_user": None if args.events is None else tuple(args.events),
            "seed": args.seed,
        },
    )
    config = SynthConfig(**opts)
    data = generate(config)
    out = Path(args.out)
    paths = write_synth(data, out)
    manifest = RunManifest.create("synth", {"synth": config.to_dict()}, config.seed)
    manifest.outputs = {k: str(v) for k, v in paths.items()}
    manifest.write(out / "manifest.json")
    return {
        "out": str(out),
        "n_users": len(data.histories),
        "n_events": sum(len(h.events) for h in data.histories.values()),
        "truth_auc": truth_auc(data),
        "manifest_hash": manifest.hash,
    }


def _feature_config(cfg: dict, args, meta: Metadata, histories) -> FeatureConfig:
    opts = _section(cfg, "features", {"seq_len": args.seq_len})
    opts.setdefault("seq_len", 64)
    stats = fit_standardization(histories.values())
    return FeatureConfig(n_questions=meta.n_questions, n_tags=meta.n_tags, standardization=stats, **opts)


def _layout(fc: FeatureConfig) -> dict:
    return {
        "query": query_columns(fc),
        "memory": memory_columns(),
        "handcrafted": [name for name, _ in handcrafted_layout(fc)],
    }


def cmd_features_fit(args, cfg) -> dict:
    histories, meta, paths = load_dataset(args.data, args.schema)
    fc = _feature_config(cfg, args, meta, histories)
    manifest = RunManifest.create("features fit", {"features": fc.to_dict()}, None, paths)
    result = {"feature_config": fc.to_dict(), "layout": _layout(fc), "manifest": manifest.to_dict()}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        return {"out": args.out, "manifest_hash": manifest.hash}
    return result


def cmd_features_apply(args, cfg) -> dict:
    histories, meta, paths = load_dataset(args.data, args.schema)
    stats_doc = json.loads(Path(args.stats).read_text())
    fc = FeatureConfig.from_dict(stats_doc["feature_config"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.create("features apply", {"features": fc.to_dict()}, None, {**paths, "stats": Path(args.stats)})
    layout = _layout(fc)
    columns = ["row_id", "content_index"] + layout["query"] + layout["memory"] + layout["handcrafted"] + ["label", "is_question"]
    files = {}
    for uid in sorted(histories):
        ft = user_features(histories[uid], meta, fc)
        matrix = np.column_stack(
            [ft.row_ids, ft.content_index, ft.query, ft.memory, ft.handcrafted, ft.labels, ft.is_question]
        ).astype(np.float64)
        name = f"user_{uid}.npy"
        np.save(out / name, np.ascontiguousarray(matrix), allow_pickle=False)
        files[str(uid)] = name
    manifest.outputs = {"dir": str(out)}
    doc = {
        "manifest": manifest.to_dict(),
        "columns": columns,
        "note": "position_norm is a placeholder here; it is set per window at batching time",
        "dtype": "float64",
        "order": "row-major, one row per event in history order",
        "files": files,
    }
    (out / "features_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), "n_users": len(files), "n_columns": len(columns), "manifest_hash": manifest.hash}


def cmd_plan(args, cfg) -> dict:
    try:
        containers = [int(x) for x in args.containers.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"--containers must be comma-separated integers, got {args.containers!r}") from None
    if not containers:
        raise CliError("--containers is empty")
    plan = build_plan(containers, args.window)
    d = plan.to_dict()
    return {
        "containers": containers,
        "window": plan.window,
        "starts": d["starts"],
        "shift_index": d["shift_index"],
        "mask": d["mask"],
    }


def cmd_train(args, cfg) -> dict:
    from .trainer import TrainConfig, train

    histories, meta, paths = load_dataset(args.data, args.schema)
    model_hp = _section(
        cfg, "model", {"d_model": args.d_model, "n_heads": args.heads, "seq_len": args.seq_len, "embed_dim": args.embed_dim}
    )
    if "d_model" in model_hp and "embed_dim" not in model_hp:
        model_hp["embed_dim"] = model_hp["d_model"]
    train_opts = _section(
        cfg,
        "train",
        {
            "epochs_phase1": args.epochs1,
            "epochs_phase2": args.epochs2,
            "lr1": args.lr1,
            "lr2": args.lr2,
            "batch_size": args.batch_size,
            "val_fraction": args.val_fraction,
            "grad_clip": args.grad_clip,
            "seed": args.seed,
            "log_wall_time": True if args.log_wall_time else None,
        },
    )
    tc = TrainConfig(**train_opts)
    feature_opts = dict(cfg.get("features", {}))
    feature_opts.pop("seq_len", None)
    out = Path(args.out)
    snapshot = {"model": model_hp, "train": tc.to_dict(), "features": feature_opts}
    manifest = RunManifest.create("train", snapshot, tc.seed, paths)
    result = train(
        histories,
        meta,
        model_hp,
        tc,
        feature_options=feature_opts,
        out_dir=out,
        checkpoint_extra={"manifest_hash": manifest.hash},
    )
    manifest.outputs = {"checkpoint": str(out / "model.ckpt"), "metrics": str(out / "metrics.jsonl")}
    manifest.write(out / "manifest.json")
    best = result.metrics[result.best_epoch - 1]
    return {
        "best_epoch": result.best_epoch,
        "best_val_auc": best["val_auc"],
        "final_train_loss": result.metrics[-1]["train_loss"],
        "checkpoint": manifest.outputs["checkpoint"],
        "metrics": manifest.outputs["metrics"],
        "manifest_hash": manifest.hash,
    }


def cmd_eval(args, cfg) -> dict:
    from .trainer import evaluate, prepare_users

    params, config, extra = load_checkpoint(args.checkpoint)
    if "feature_config" not in extra:
        raise CliError(f"{args.checkpoint} carries no feature configuration")
    fc = FeatureConfig.from_dict(extra["feature_config"])
    histories, meta, _ = load_dataset(args.data, args.schema)
    if meta.n_content != config.n_content:
        raise CliError(f"dataset has {meta.n_content} content items, checkpoint expects {config.n_content}")
    users = sorted(histories)
    if args.users:
        wanted = {int(u) for u in args.users.split(",")}
        missing = wanted - set(users)
        if missing:
            raise CliError(f"users not in data: {sorted(missing)}")
        users = sorted(wanted)
    stride = extra.get("stride") or max(1, config.seq_len // 2)
    prepared = prepare_users(histories, users, meta, fc, stride)
    row_ids, labels, scores = evaluate(params, config, prepared)
    if args.predictions:
        with open(args.predictions, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("row_id", "label", "p_correct"))
            for r, y, p in zip(row_ids.tolist(), labels.tolist(), scores.tolist()):
                w.writerow((r, y, repr(p)))
    return {"auc": roc_auc(labels, scores), "n_users": len(prepared), "n_questions": int(labels.size)}


def cmd_gradcheck(args, cfg) -> dict:
    from . import autodiff as ad
    from .model import loss
    from .trainer import micro_problem

    seed = 0 if args.seed is None else args.seed
    params, config, batch = micro_problem(seed)
    err = ad.gradcheck(lambda: loss(params, config, batch), list(params.values()), eps=args.eps)
    return {"max_rel_err": err, "scale": args.scale, "n_params": int(sum(p.data.size for p in params.values()))}


def cmd_auc(args, cfg) -> dict:
    labels = _read_column(args.labels)
    scores = _read_column(args.scores)
    if len(labels) != len(scores):
        raise CliError(f"{len(labels)} labels but {len(scores)} scores")
    return {"auc": roc_auc([int(x) for x in labels], scores)}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config value or 0)")
    common.add_argument("--config", default=None, help="TOML or JSON config file")
    common.add_argument("--out", default=None, help="output path")
    common.add_argument("--pretty", action="store_true", help="human-readable key/value output")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="directory with events.csv, questions.csv, lectures.csv")
    data.add_argument("--schema", choices=[s.value for s in Schema], default=Schema.CANONICAL.value)

    parser = argparse.ArgumentParser(prog="containerkt", description="Container-aware knowledge tracing toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--users", type=int)
    p.add_argument("--questions", type=int)
    p.add_argument("--lectures", type=int)
    p.add_argument("--tags", type=int)
    p.add_argument("--events", type=int, nargs=2, metavar=("MIN", "MAX"), help="events per user range")
    p.set_defaults(func=cmd_synth, needs_out=True)

    feats = sub.add_parser("features", help="fit or apply feature standardization")
    fsub = feats.add_subparsers(dest="features_command", required=True)
    p = fsub.add_parser("fit", parents=[common, data], help="fit standardization statistics")
    p.add_argument("--seq-len", type=int)
    p.set_defaults(func=cmd_features_fit, needs_out=False)
    p = fsub.add_parser("apply", parents=[common, data], help="write per-user feature matrices")
    p.add_argument("--stats", required=True, help="output of `features fit`")
    p.set_defaults(func=cmd_features_apply, needs_out=True)

    p = sub.add_parser("plan", parents=[common], help="container plan for a container id list")
    p.add_argument("--containers", required=True, help="comma-separated task_container_id values")
    p.add_argument("--window", type=int, default=None, help="mask window W (default: sequence length)")
    p.set_defaults(func=cmd_plan, needs_out=False)

    p = sub.add_parser("train", parents=[common, data], help="train a model")
    p.add_argument("--d-model", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--epochs1", type=int)
    p.add_argument("--epochs2", type=int)
    p.add_argument("--lr1", type=float)
    p.add_argument("--lr2", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--log-wall-time", action="store_true", help="record wall_seconds (breaks byte-identical metrics)")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[common, data], help="score a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", default=None, help="comma-separated user ids (default: all)")
    p.add_argument("--predictions", default=None, help="write row_id,label,p_correct CSV here")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the model loss")
    p.add_argument("--scale", choices=["micro"], default="micro")
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck, needs_out=False)

    p = sub.add_parser("auc", parents=[common], help="ROC-AUC of a labels file against a scores file")
    p.add_argument("--labels", required=True)
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_auc, needs_out=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        limiter = _apply_threads()
        try:
            cfg = load_config(args.config)
            result = args.func(args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (CliError, ParseError, CheckpointError, OSError, ValueError, KeyError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc).replace("\n", " ")}))
        return 1
    if args.out and not args.needs_out and args.func is not cmd_features_fit:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
    _emit(result, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
