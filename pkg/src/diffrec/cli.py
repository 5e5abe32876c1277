"""Command-line surface: preprocess, train, evaluate, infer, inspect-schedule,
synth-data, baseline-pop.

Every run-config field can be set from a config file or overridden by a
command-line flag of the same dotted name (e.g. --model.dim 128). Errors
exit nonzero with a single machine-parseable line on stderr:
error: code=<CODE> msg="...".
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import data as data_mod
from . import metrics as metrics_mod
from .engine import NonFiniteError
from .inference import InferenceConfig, infer_efficient, infer_full_chain, rank_items
from .model import init_params
from .optim import AdamState
from .rng import RngStreams
from .schedule import SCHEDULE_KINDS, make_schedule, schedule_rows
from .training import ImportanceSampler, train_epoch


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: str, message: str) -> "CliError":
    return CliError(code, message)


def _out_dir(config) -> Path:
    override = os.environ.get("DIFFREC_OUT_DIR")
    path = Path(override) if override else Path(config.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (key = value lines)")
    for dotted in config_mod.flatten(config_mod.RunConfig()):
        parser.add_argument(f"--{dotted}", dest=dotted.replace(".", "__"),
                            metavar="V", help=argparse.SUPPRESS)


def _gather_config(args) -> "config_mod.RunConfig":
    overrides = {}
    for dotted in config_mod.flatten(config_mod.RunConfig()):
        value = getattr(args, dotted.replace(".", "__"), None)
        if value is not None:
            overrides[dotted] = value
    try:
        return config_mod.load_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        raise _fail("E_CONFIG", str(exc)) from exc


def _write_report(report, prefix: Path) -> None:
    flat = report.as_dict()
    with open(f"{prefix}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(flat.keys()))
        writer.writeheader()
        writer.writerow({k: f"{v:.6f}" for k, v in flat.items()})
    payload = {k: round(v, 6) for k, v in flat.items()}
    payload["users"] = report.users
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_report(report) -> None:
    for name, value in report.as_dict().items():
        print(f"{name}\t{value:.4f}")


def cmd_preprocess(args) -> int:
    records, malformed = data_mod.ingest(args.input, args.format)
    if malformed:
        print(f"skipped {malformed} malformed lines", file=sys.stderr)
    kept = data_mod.kcore_filter(records, k=args.k, iterative=not args.single_pass)
    if not kept:
        raise _fail("E_DATASET", "no interactions survive k-core filtering")
    dataset = data_mod.build_dataset(kept)
    data_mod.save_dataset(dataset, args.output)
    stats = data_mod.save_stats_sidecar(dataset, str(args.output) + ".stats.json")
    print(", ".join(f"{k}={v}" for k, v in stats.items()))
    return 0


def cmd_synth_data(args) -> int:
    dataset = data_mod.synth_generate(args.users, args.items, args.sharpness,
                                      args.seed, args.min_len, args.max_len)
    data_mod.save_dataset(dataset, args.output)
    stats = data_mod.save_stats_sidecar(dataset, str(args.output) + ".stats.json")
    print(", ".join(f"{k}={v}" for k, v in stats.items()))
    return 0


def cmd_inspect_schedule(args) -> int:
    table = make_schedule(args.kind, args.steps)
    rows = list(schedule_rows(table))
    target = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(["n", "beta", "alpha_bar", "beta_tilde"])
        for n, beta, alpha_bar, beta_tilde in rows:
            writer.writerow([n, f"{beta:.12g}", f"{alpha_bar:.12g}", f"{beta_tilde:.12g}"])
    finally:
        if args.output:
            target.close()
    return 0


def _load_dataset(path):
    if not path:
        raise _fail("E_CONFIG", "no dataset path configured")
    try:
        return data_mod.load_dataset(path)
    except FileNotFoundError as exc:
        raise _fail("E_IO", f"dataset not found: {path}") from exc
    except ValueError as exc:
        raise _fail("E_DATASET", str(exc)) from exc


def cmd_train(args) -> int:
    if args.resume:
        ck = _load_checkpoint(args.resume)
        config = ck.config
        # explicit dotted flags still apply on resume (e.g. extending epochs)
        for dotted in config_mod.flatten(config_mod.RunConfig()):
            value = getattr(args, dotted.replace(".", "__"), None)
            if value is not None:
                config_mod.set_dotted(config, dotted, value)
        config.validate()
        params, opt, sampler = ck.params, ck.opt, ck.sampler
        streams = ck.restore_streams()
        start_epoch = ck.epoch
    else:
        config = _gather_config(args)
        streams = RngStreams(config.master_seed)
        start_epoch = 0
    dataset = _load_dataset(config.dataset)
    schedule = make_schedule(config.model.schedule, config.model.steps)
    if not args.resume:
        params = init_params(config.model, dataset.vocab_size, streams.get("init"))
        opt = AdamState.init(params.tensors, lr=config.train.lr,
                             b1=config.train.adam_beta1, b2=config.train.adam_beta2,
                             eps=config.train.adam_eps)
        sampler = ImportanceSampler(config.model.steps, config.train.history_depth)

    out = _out_dir(config)
    inf_config = config.inference_config()
    metrics_path = out / "metrics.csv"
    if not metrics_path.exists():
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(["epoch", "mean_mse", "mean_rec", "val_ndcg10"])
    best_path = out / "best.json"
    best = {"epoch": -1, "val_ndcg10": -1.0, "checkpoint": ""}
    if best_path.exists():
        best = json.loads(best_path.read_text())

    if start_epoch == 0:
        ckpt_mod.save_checkpoint(out / "epoch_000.dfkp", config, params, opt,
                                 sampler, streams, 0)

    for epoch in range(start_epoch + 1, config.train.epochs + 1):
        stats = train_epoch(
            dataset, params, sampler, opt, schedule, streams,
            batch_size=config.train.batch_size, grad_clip=config.train.grad_clip,
            per_batch_step_sampling=config.train.per_batch_step_sampling,
            rec_on_clean=config.train.rec_loss_on_clean,
        )
        report = metrics_mod.evaluate_model(dataset, "valid", params, schedule, inf_config)
        ndcg10 = report.ndcg[10]
        with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(
                [epoch, f"{stats.mean_mse:.6f}", f"{stats.mean_rec:.6f}", f"{ndcg10:.6f}"])
        name = f"epoch_{epoch:03d}.dfkp"
        ckpt_mod.save_checkpoint(out / name, config, params, opt, sampler, streams, epoch)
        if ndcg10 > best["val_ndcg10"]:
            best = {"epoch": epoch, "val_ndcg10": ndcg10, "checkpoint": name}
            best_path.write_text(json.dumps(best, indent=2) + "\n")
        print(f"epoch {epoch}: mse={stats.mean_mse:.4f} rec={stats.mean_rec:.4f} "
              f"val_ndcg10={ndcg10:.4f} ({stats.sequences_per_second:.1f} seq/s)")
    print(f"best: epoch {best['epoch']} val_ndcg10={best['val_ndcg10']:.4f} "
          f"({best['checkpoint'] or 'n/a'})")
    return 0


def _load_checkpoint(path):
    try:
        return ckpt_mod.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise _fail("E_IO", f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise _fail("E_CHECKPOINT", str(exc)) from exc


def _inference_config(args, config) -> InferenceConfig:
    mode = args.mode or config.infer.mode
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.replace(",", " ").split())
    elif args.num_seeds:
        config.infer.num_seeds = args.num_seeds
        config.infer.seeds = None
        seeds = config.resolve_seeds()
    else:
        seeds = config.resolve_seeds()
    return InferenceConfig(mode=mode, seeds=seeds)


def cmd_evaluate(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.dataset or ck.config.dataset)
    schedule = make_schedule(ck.config.model.schedule, ck.config.model.steps)
    inf_config = _inference_config(args, ck.config)
    report = metrics_mod.evaluate_model(dataset, args.split, ck.params, schedule,
                                        inf_config, exclude_seen=args.exclude_seen)
    if args.output:
        _write_report(report, Path(args.output))
    _print_report(report)
    return 0


def cmd_baseline_pop(args) -> int:
    dataset = _load_dataset(args.dataset)
    scores = metrics_mod.popularity_scores(dataset)
    report = metrics_mod.evaluate_scores(dataset, args.split, scores)
    if args.output:
        _write_report(report, Path(args.output))
    _print_report(report)
    return 0


def cmd_infer(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.dataset or ck.config.dataset)
    schedule = make_schedule(ck.config.model.schedule, ck.config.model.steps)
    inf_config = _inference_config(args, ck.config)

    if args.user:
        try:
            user_indices = [dataset.user_ids.index(u) for u in args.user]
        except ValueError as exc:
            raise _fail("E_INVALID", f"unknown user id: {exc}") from exc
    else:
        user_indices = list(range(dataset.num_users))
        if args.limit:
            user_indices = user_indices[:args.limit]

    from .inference import prepare_inference_sequence

    records = []
    for u in user_indices:
        row = prepare_inference_sequence(dataset.sequences[u], ck.config.model.seq_len)
        if inf_config.mode == "efficient":
            result = infer_efficient(row, ck.params, schedule, inf_config, user_index=u)
        else:
            result = infer_full_chain(row, ck.params, schedule,
                                      seed=inf_config.seeds[0], user_index=u)
        top = rank_items(result.probabilities, args.top_k)
        records.append({
            "user": dataset.user_ids[u],
            "items": [dataset.item_ids[v - data_mod.NUM_RESERVED_IDS] for v in top],
            "probabilities": [round(float(result.probabilities[v]), 8) for v in top],
        })

    target = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        if args.emit == "json":
            json.dump(records, target, indent=2)
            target.write("\n")
        else:
            writer = csv.writer(target)
            writer.writerow(["user", "rank", "item", "probability"])
            for rec in records:
                for rank, (item, prob) in enumerate(zip(rec["items"], rec["probabilities"]), 1):
                    writer.writerow([rec["user"], rank, item, prob])
    finally:
        if args.output:
            target.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffrec",
                                     description="diffusion-based sequential recommender")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="ingest, filter and pack an interaction file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "tsv", "movielens"), required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--single-pass", action="store_true",
                   help="one filtering pass instead of the fixed point")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth-data", help="generate a seeded Markov-chain dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--sharpness", type=float, default=7.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("inspect-schedule", help="dump a noise schedule as CSV")
    p.add_argument("--kind", choices=SCHEDULE_KINDS, required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--output")
    p.set_defaults(func=cmd_inspect_schedule)

    p = sub.add_parser("train", help="train on a preprocessed dataset")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank held-out targets from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="override the dataset recorded in the checkpoint")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--mode", choices=("efficient", "full_chain"))
    p.add_argument("--seeds", help="explicit seed list, e.g. 0,1,2")
    p.add_argument("--num-seeds", type=int)
    p.add_argument("--exclude-seen", action="store_true")
    p.add_argument("--output", help="report path prefix (writes .csv and .json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline-pop", help="popularity baseline on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--output")
    p.set_defaults(func=cmd_baseline_pop)

    p = sub.add_parser("infer", help="top-K recommendations for users")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--user", action="append", help="original user id (repeatable)")
    p.add_argument("--limit", type=int, help="cap the number of users when --user is absent")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--mode", choices=("efficient", "full_chain"))
    p.add_argument("--seeds")
    p.add_argument("--num-seeds", type=int)
    p.add_argument("--emit", choices=("json", "csv"), default="json")
    p.add_argument("--output")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f'error: code={exc.code} msg="{exc}"', file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        print(f'error: code=E_NUMERIC msg="{exc}"', file=sys.stderr)
        return 1
    except OSError as exc:
        print(f'error: code=E_IO msg="{exc}"', file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f'error: code=E_INVALID msg="{exc}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
