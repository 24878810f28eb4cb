"""Command-line interface.

Subcommands: ``train``, ``eval``, ``synth``, ``gradcheck``, ``report``.
Exit status 0 on success, 1 on a validation problem (bad flags, missing or
malformed files, inconsistent configuration), 2 on a numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import model as mdl
from .autodiff import NumericError
from .config import ConfigError, apply_env, load_config, resolve_settings
from .data import (
    DataFormatError,
    SyntheticSpec,
    generate_synthetic,
    load_interactions,
    load_modality_features,
    split_edges,
    write_interactions,
    write_modality_features,
)
from .evaluation import evaluate_scores
from .gradcheck import run_loss_checks, run_primitive_checks
from .trainer import Trainer, load_checkpoint

__all__ = ["main"]


class CliError(Exception):
    """Validation failure: wrong usage or unusable inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise CliError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mmssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a data directory")
    p_train.add_argument("--data", required=True, help="directory with interactions.txt and *.mmf")
    p_train.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p_train.add_argument("--config", default=None, help="JSON config of dotted keys")
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=("val", "test"), default="test")
    p_eval.add_argument("--k", type=int, default=None, help="override eval.k")
    p_eval.add_argument("--format", choices=("json", "text"), default="text")

    p_synth = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--spec", default=None, help="JSON synthetic spec (defaults otherwise)")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument(
        "--module",
        choices=("losses", "substrate", "all"),
        default="all",
    )
    p_grad.add_argument("--tolerance", type=float, default=1e-4)

    p_report = sub.add_parser("report", help="pretty-print a metrics log or eval report")
    p_report.add_argument("--log", required=True)
    p_report.add_argument("--format", choices=("json", "text"), default="text")
    return parser


def _load_data_dir(data_dir: str):
    root = Path(data_dir)
    inter = root / "interactions.txt"
    if not inter.is_file():
        raise CliError(f"no interactions.txt under {root}")
    graph = load_interactions(inter)
    feature_paths = sorted(root.glob("*.mmf"))
    if not feature_paths:
        raise CliError(f"no modality feature files (*.mmf) under {root}")
    features = [load_modality_features(p) for p in feature_paths]
    for table in features:
        if table.num_items != graph.num_items:
            raise CliError(
                f"feature table {table.name} has {table.num_items} rows, "
                f"graph declares {graph.num_items} items"
            )
    return graph, features


def _cmd_train(args) -> int:
    flat = apply_env(load_config(args.config))
    settings = resolve_settings(flat)
    graph, features = _load_data_dir(args.data)
    split = split_edges(graph, settings.train.split, seed=settings.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(settings.flat, sort_keys=True, indent=2))
    trainer = Trainer(
        settings.train,
        settings.enc,
        settings.adv,
        settings.objective,
        settings.eval,
        graph,
        features,
        split,
        config_flat=settings.flat,
    )
    if args.resume:
        trainer.restore(args.resume)
    result = trainer.run(
        checkpoint_path=out / "final.ckpt", log_path=out / "metrics.ndjson"
    )
    if result.best_arrays:
        from .trainer import save_checkpoint

        best_meta = trainer.checkpoint_meta()
        best_meta["epoch"] = result.best_epoch
        save_checkpoint(out / "best.ckpt", {**result.best_arrays}, best_meta)
    if result.aborted:
        print("training aborted on a non-finite loss; last finished epoch kept", file=sys.stderr)
        return 2
    last = result.log[-1] if result.log else {}
    print(
        f"trained {len(result.log)} epochs; "
        f"best recall@{settings.eval.k} {result.best_recall:.5f} at epoch {result.best_epoch}"
    )
    if last:
        print(json.dumps(last, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    arrays, meta = load_checkpoint(args.checkpoint)
    flat = dict(meta.get("config", {}))
    settings = resolve_settings(flat)
    graph, features = _load_data_dir(args.data)
    split = split_edges(graph, settings.train.split, seed=settings.train.seed)
    trainer = Trainer(
        settings.train,
        settings.enc,
        settings.adv,
        settings.objective,
        settings.eval,
        graph,
        features,
        split,
        config_flat=settings.flat,
    )
    for name, p in trainer.state.named_parameters().items():
        if name not in arrays:
            raise CliError(f"checkpoint is missing parameter {name}")
        p.data[:] = arrays[name]
    trainer.state.disc.bn1.mean[:] = arrays["bn.disc.bn1.mean"]
    trainer.state.disc.bn1.var[:] = arrays["bn.disc.bn1.var"]
    trainer.state.disc.bn2.mean[:] = arrays["bn.disc.bn2.mean"]
    trainer.state.disc.bn2.var[:] = arrays["bn.disc.bn2.var"]
    trainer.neighborhoods = mdl.refresh_neighborhoods(
        trainer.state, trainer.adj, features, settings.enc.top_k, settings.adv.block_rows
    )
    fwd = trainer._eval_forward()
    scores = fwd.h_users.data @ fwd.h_items.data.T
    from .trainer import _edges_by_user

    relevant = _edges_by_user(
        split.test if args.split == "test" else split.val, graph.num_users
    )
    report = evaluate_scores(
        scores,
        train_items=trainer.train_graph.user_items,
        relevant=relevant,
        k=args.k or settings.eval.k,
        boundaries=settings.eval.buckets,
        threads=settings.eval.threads,
    )
    print(report.to_json() if args.format == "json" else report.to_text())
    return 0


def _cmd_synth(args) -> int:
    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
    graph, features, planted = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(graph, out / "interactions.txt")
    for table in features:
        write_modality_features(out / f"{table.name}.mmf", table.values)
    write_modality_features(out / "planted.dat", planted.astype("<f4"))
    (out / "spec.json").write_text(json.dumps(spec.to_json(), sort_keys=True, indent=2))
    print(
        f"wrote {graph.num_users} users, {graph.num_items} items, "
        f"{graph.num_edges} interactions, {len(features)} modalities to {out}"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    failures = 0
    sections = []
    if args.module in ("losses", "all"):
        sections.append(("losses", run_loss_checks()))
    if args.module in ("substrate", "all"):
        sections.append(("substrate", run_primitive_checks()))
    for section, results in sections:
        for name, err in results.items():
            ok = err <= args.tolerance
            failures += 0 if ok else 1
            print(f"{section}/{name}: max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    if failures:
        print(f"{failures} gradient check(s) above tolerance {args.tolerance}", file=sys.stderr)
        return 2
    return 0


def _cmd_report(args) -> int:
    path = Path(args.log)
    if not path.is_file():
        raise CliError(f"no such log file: {path}")
    text = path.read_text(encoding="utf-8").strip()
    if not text:
        raise CliError(f"log file {path} is empty")
    if text.lstrip().startswith("{") and "\n" not in text.lstrip().rstrip():
        doc = json.loads(text)
        print(json.dumps(doc, sort_keys=True, indent=2))
        return 0
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise CliError(f"{path.name} line {lineno}: not valid JSON: {e}") from e
    if args.format == "json":
        print(json.dumps(records, sort_keys=True, indent=2))
        return 0
    cols = ("epoch", "l_bpr", "l_cl", "l_g", "l_d", "recall", "ndcg", "precision")
    print(" ".join(f"{c:>10}" for c in cols))
    for rec in records:
        cells = []
        for c in cols:
            v = rec.get(c, "")
            cells.append(f"{v:>10}" if isinstance(v, int) else f"{v:>10.5f}" if v != "" else " " * 10)
        print(" ".join(cells))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DataFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
