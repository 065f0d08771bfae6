"""Command-line entry point: ``ract {prepare,synth,train,eval,curves}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from .actor import Actor
from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, load_config
from .data import DataError, binarize_and_filter, load_events, load_matrix, save_matrix, split_users, synthesize
from .metrics import MetricSpec
from .trainer import (
    FoldIn,
    Trainer,
    TrainingError,
    activity_breakdown,
    config_from_meta,
    evaluate,
    read_metrics_csv,
    vocab_digest,
)

RUN_FILES = ("config.resolved", "metrics.csv", "best.ckpt", "final.ckpt")
CURVE_SERIES = ("train_loss", "val_ndcg", "val_recall", "critic_mse")


class CliError(Exception):
    pass


def _print_stats(matrix, out=None):
    out = out or sys.stdout
    s = matrix.stats()
    print(f"{'users':<14}{s['users']:>12}", file=out)
    print(f"{'items':<14}{s['items']:>12}", file=out)
    print(f"{'interactions':<14}{s['interactions']:>12}", file=out)
    print(f"{'sparsity %':<14}{s['sparsity_pct']:>12.3f}", file=out)


def cmd_prepare(args):
    loaded = load_events(args.input)
    print(loaded.report())
    matrix = binarize_and_filter(loaded.events, args.min_rating, args.min_user_items, args.min_item_users)
    save_matrix(matrix, args.output)
    _print_stats(matrix)
    return 0


def cmd_synth(args):
    matrix, _, _ = synthesize(args.users, args.items, args.clusters, args.seed, args.p_in, args.p_out)
    save_matrix(matrix, args.output)
    _print_stats(matrix)
    return 0


def _parse_stop(text):
    if text is None:
        return None
    stage, _, epoch = text.partition(":")
    try:
        return int(stage), int(epoch)
    except ValueError:
        raise CliError(f"--stop-after expects STAGE:EPOCH, got {text!r}") from None


def _clock(args):
    return (lambda: 0.0) if args.no_timing else time.perf_counter


def cmd_train(args):
    run_dir = Path(args.run_dir)
    stop = _parse_stop(args.stop_after)
    if args.resume:
        ckpt = run_dir / "final.ckpt"
        cfg = load_config(run_dir / "config.resolved")
        matrix = load_matrix(cfg.data)
        trainer = Trainer.from_checkpoint(ckpt, matrix, clock=_clock(args))
    else:
        if args.config is None:
            raise CliError("train needs --config (or --resume with --run-dir)")
        cfg = load_config(args.config)
        overrides = {k: v for k, v in (("data", args.data), ("seed", args.seed)) if v is not None}
        cfg = cfg.with_values(**overrides)
        if not cfg.data:
            raise CliError("no data path: set 'data' in the config or pass --data")
        matrix = load_matrix(cfg.data)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.resolved").write_text(cfg.dumps(), encoding="utf-8")
        trainer = Trainer(matrix, cfg.actor_config(matrix.n_items), cfg.schedule(), cfg.split(), cfg.features(), _clock(args))
    try:
        trainer.fit(stop_after=stop)
    finally:
        # keep whatever was logged, even when a stage fails
        trainer.log.to_csv(run_dir / "metrics.csv")
    trainer.save_best(run_dir / "best.ckpt")
    trainer.save_checkpoint(run_dir / "final.ckpt")
    stage, epoch = trainer.best_at
    print(f"best val {trainer.schedule.critic_metric} {trainer.best_score:.6f} at stage {stage} epoch {epoch}")
    return 0


def _parse_cutoffs(text):
    try:
        cutoffs = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise CliError(f"--cutoffs expects integers like 5,20,100, got {text!r}") from None
    if not cutoffs or min(cutoffs) < 1:
        raise CliError("--cutoffs must list positive integers")
    return cutoffs


def cmd_eval(args):
    meta, tensors = read_checkpoint(args.checkpoint)
    matrix = load_matrix(args.data)
    actor_cfg, schedule, split_spec, _ = config_from_meta(meta)
    if actor_cfg.n_items != matrix.n_items:
        raise CliError(f"checkpoint has {actor_cfg.n_items} items but data has {matrix.n_items}")
    digest = meta.get("data.vocab_sha256")
    if digest is not None and digest != vocab_digest(matrix):
        raise CliError("item vocabulary of the data differs from the one the checkpoint was trained on")
    actor = Actor(actor_cfg, params={k[6:]: v for k, v in tensors.items() if k.startswith("actor/")})
    split = split_users(matrix, split_spec)
    users = {"val": split.val_users, "test": split.test_users}[args.users]
    fold_in = FoldIn.build(matrix, users, schedule.holdout_fraction, schedule.seed)
    cutoffs = _parse_cutoffs(args.cutoffs)
    metrics = [MetricSpec(kind, r) for kind in ("ndcg", "recall") for r in cutoffs]
    res = evaluate(actor, fold_in, metrics)
    print(f"{fold_in.users.size} {args.users} users")
    for m in metrics:
        print(f"{str(m):<12}{res.mean(m):.6f}")
    if args.breakdown:
        key = MetricSpec("ndcg", max(cutoffs))
        edges = tuple(int(e) for e in args.edges.split(","))
        print(f"activity breakdown ({key})")
        for label, n, mean in activity_breakdown(res.per_user[str(key)], res.n_interactions, edges):
            print(f"{label:<14}{n:>7}  {mean:.6f}")
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "n_interactions", *map(str, metrics)])
            for i, u in enumerate(res.users):
                w.writerow([int(u), int(res.n_interactions[i]), *(repr(float(res.per_user[str(m)][i])) for m in metrics)])
    return 0


def curve_rows(metrics_rows):
    """Long-format ``(series, stage, epoch, step, value)`` rows.

    Values are copied verbatim from the metrics CSV. ``stage_start`` is 1 on
    the first epoch of each stage and 0 elsewhere.
    """
    out = []
    for step, r in enumerate(metrics_rows, 1):
        first = step == 1 or metrics_rows[step - 2]["stage"] != r["stage"]
        for s in CURVE_SERIES:
            out.append((s, r["stage"], r["epoch"], step, r[s]))
        out.append(("stage_start", r["stage"], r["epoch"], step, "1" if first else "0"))
    return out


def cmd_curves(args):
    path = Path(args.run_dir) / "metrics.csv"
    if not path.exists():
        raise CliError(f"no metrics.csv in {args.run_dir}")
    rows = read_metrics_csv(path)
    if not rows:
        raise CliError(f"{path} has no epochs")
    out = open(args.output, "w", encoding="utf-8", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["series", "stage", "epoch", "step", "value"])
        w.writerows(curve_rows(rows))
    finally:
        if args.output:
            out.close()
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ract", description="Ranking-critical training for VAE recommenders.")
    p.add_argument("--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="ratings file -> binary interaction matrix")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--min-rating", type=float, default=4.0)
    sp.add_argument("--min-user-items", type=int, default=5)
    sp.add_argument("--min-item-users", type=int, default=0)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("synth", help="generate the cluster-structured benchmark")
    sp.add_argument("--users", type=int, default=2000)
    sp.add_argument("--items", type=int, default=300)
    sp.add_argument("--clusters", type=int, default=8)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--p-in", type=float, default=0.3)
    sp.add_argument("--p-out", type=float, default=0.01)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="run the three training stages")
    sp.add_argument("--config")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--data", help="overrides the config's data path")
    sp.add_argument("--seed", type=int, help="overrides the config's seed")
    sp.add_argument("--resume", action="store_true", help="continue from RUN_DIR/final.ckpt")
    sp.add_argument("--stop-after", metavar="STAGE:EPOCH")
    sp.add_argument("--no-timing", action="store_true", help="log wall_seconds as 0 so outputs are byte-reproducible")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on held-out users")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--cutoffs", default="20,50,100")
    sp.add_argument("--users", choices=("val", "test"), default="test")
    sp.add_argument("--breakdown", action="store_true")
    sp.add_argument("--edges", default="250,500,750")
    sp.add_argument("--output", help="per-user CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("curves", help="metrics.csv -> long-format curve CSV")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_curves)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DataError, CheckpointError, TrainingError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
