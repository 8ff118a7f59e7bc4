"""Command-line entry point: ``dmmh {synth,train,encode,query,eval,gradcheck}``.

Machine-readable output is JSON lines on stdout, diagnostics go to stderr.
Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/config error.

Settings resolve as: built-in defaults < ``--config`` JSON < command-line flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data, model as M
from .hamming import BitsMismatchError, CodeBank, CodeFormatError, knn, pack
from .metrics import DEFAULT_PRECISION_AT, PAPER_MAP, mean_average_precision
from .nn import NonFiniteError, make_rng

RUN_KEYS = {"manifest", "checkpoint", "threads", "resume"}

# small enough for an exhaustive central-difference sweep
GRADCHECK_DEFAULTS = {
    "modalities": [["vision", 5], ["text", 4]],
    "d_model": 4, "seq_len": 3, "bits": 16, "d_state": 2, "num_classes": 3,
    "lambda_cls": 0.5, "batch_size": 4,
}


class UsageError(Exception):
    pass


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - RUN_KEYS - M.ModelConfig.keys()
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _overrides(args, names) -> dict:
    return {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}


# ---------------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    try:
        dims = [int(d) for d in args.dims.split(",")]
    except ValueError:
        raise UsageError(f"--dims must be comma-separated integers, got {args.dims!r}") from None
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    try:
        path = data.generate_synthetic(args.out, args.classes, args.per_class, dims,
                                       args.sigma, seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    emit({"manifest": str(path)})
    return 0


_TRAIN_FLAGS = ("epochs", "bits", "lr", "batch_size", "d_model", "seq_len", "d_state", "seed")


def cmd_train(args, cfg) -> int:
    run = dict(cfg)
    run.update(_overrides(args, ("manifest", "checkpoint", "threads") + _TRAIN_FLAGS))
    if args.resume or run.pop("resume", None):
        raise UsageError("resuming from a checkpoint is not supported")
    for key in ("manifest", "checkpoint"):
        if not run.get(key):
            raise UsageError(f"train needs --{key} (or {key!r} in the config)")
    ds = data.load_dataset(run["manifest"])
    mods = [[m.name, m.dim] for m in ds.manifest.modalities]
    if "modalities" in run and [list(m) for m in run["modalities"]] != mods:
        raise UsageError(f"config modalities {run['modalities']} do not match manifest {mods}")
    model_keys = {k: v for k, v in run.items() if k in M.ModelConfig.keys()}
    model_keys["modalities"] = mods
    model_keys.setdefault("num_classes", ds.manifest.categories)
    config = M.ModelConfig.from_dict(model_keys)

    effective = {"manifest": run["manifest"], "checkpoint": run["checkpoint"],
                 "threads": run.get("threads", 1), **config.to_dict()}
    emit({"event": "config", "config": effective})
    feats, labels, _ = ds.split("training")
    net, log = M.train(config, feats, labels,
                       on_epoch=lambda e, v: emit({"epoch": e, "loss": v}))
    M.save_checkpoint(run["checkpoint"], net)
    emit({"event": "done", "checkpoint": run["checkpoint"],
          "initial_loss": log.epoch_loss[0], "final_loss": log.epoch_loss[-1]})
    return 0


def cmd_encode(args, cfg) -> int:
    ckpt = args.checkpoint or cfg.get("checkpoint")
    manifest = args.manifest or cfg.get("manifest")
    if not ckpt or not manifest:
        raise UsageError("encode needs --checkpoint and --manifest")
    if args.split not in data.SPLITS:
        raise UsageError(f"unknown split {args.split!r}; expected one of {data.SPLITS}")
    net = M.load_checkpoint(ckpt)
    ds = data.load_dataset(manifest)
    feats, labels, ids = ds.split(args.split)
    bank = M.encode_bank(net, feats, labels, ids, threads=_threads(args, cfg))
    bank.save(args.out)
    emit({"codes": str(args.out), "n": len(bank), "bits": bank.k, "split": args.split})
    return 0


def _parse_code(text: str, k: int) -> np.ndarray:
    text = text.strip()
    if len(text) != k or set(text) - set("01+-"):
        raise UsageError(f"--code must be {k} characters of 0/1 or +/-")
    return pack(np.array([1 if ch in "1+" else -1 for ch in text]))


def cmd_query(args, cfg) -> int:
    bank = CodeBank.load(args.codes)
    if (args.id is None) == (args.code is None):
        raise UsageError("give exactly one of --id or --code")
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    if args.id is not None:
        source = CodeBank.load(args.query_codes) if args.query_codes else bank
        if source.k != bank.k:
            raise BitsMismatchError(f"query bank has {source.k} bits, bank {bank.k}")
        try:
            q = source.words[source.index_of(args.id)]
        except KeyError as e:
            raise UsageError(str(e)) from None
    else:
        q = _parse_code(args.code, bank.k)
    for r, (i, d) in enumerate(knn(q, bank, args.topk).pairs(), start=1):
        emit({"rank": r, "id": i, "distance": d})
    return 0


def cmd_eval(args, cfg) -> int:
    queries = CodeBank.load(args.query)
    retrieval = CodeBank.load(args.retrieval)
    if args.paper_ref is not None and args.paper_ref not in PAPER_MAP:
        raise UsageError(f"--paper-ref must be one of {sorted(PAPER_MAP)}")
    try:
        ks = [int(k) for k in args.precision_at.split(",") if k]
    except ValueError:
        raise UsageError("--precision-at must be comma-separated integers") from None
    if args.paper_ref is not None and queries.k not in PAPER_MAP[args.paper_ref]:
        raise UsageError(f"no published value for {queries.k} bits")
    report = mean_average_precision(queries, retrieval, ks, _threads(args, cfg), args.paper_ref)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    emit(report.to_dict())
    return 0


def cmd_gradcheck(args, cfg) -> int:
    keys = dict(GRADCHECK_DEFAULTS)
    keys.update({k: v for k, v in cfg.items() if k in M.ModelConfig.keys()})
    keys["dtype"] = "float64"
    if args.seed is not None:
        keys["seed"] = args.seed
    config = M.ModelConfig.from_dict(keys)
    rng = make_rng(config.seed)
    worst: dict[str, float] = {}
    skipped = 0
    corrupt = "hash.weight" if args.corrupt else None
    for _ in range(args.instances):
        inst = M.check_instance(config, rng)
        skipped += inst.rejected
        rep = M.model_grad_check(inst.model, inst.feats, inst.labels, args.tolerance,
                                 max_entries=args.max_entries, rng=rng, corrupt=corrupt)
        for name, err in rep.errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        emit({"param": name, "max_rel_err": err, "passed": err < args.tolerance})
    ok = all(e < args.tolerance for e in worst.values())
    emit({"event": "summary", "passed": ok, "max_rel_err": max(worst.values()),
          "tolerance": args.tolerance, "instances": args.instances,
          "skipped_draws": skipped})
    return 0 if ok else 1


def _threads(args, cfg) -> int:
    t = args.threads if args.threads is not None else cfg.get("threads", 1)
    if t < 1:
        raise UsageError("--threads must be >= 1")
    return t


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")

    p = argparse.ArgumentParser(prog="dmmh", description="multi-modal deep hashing toolkit")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON run config")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--dims", required=True, help="comma-separated modality dims, e.g. 64,32")
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--out", default="synthetic")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--epochs", type=int)
    s.add_argument("--bits", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--d-model", type=int)
    s.add_argument("--seq-len", type=int)
    s.add_argument("--d-state", type=int)
    s.add_argument("--resume", action="store_true", help="not supported; always an error")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", parents=[common], help="encode a split into a code bank")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("query", parents=[common], help="Hamming k-NN against a code bank")
    s.add_argument("--codes", required=True)
    s.add_argument("--id", type=int)
    s.add_argument("--code", help="k characters of 0/1 (or -/+), bit 0 first")
    s.add_argument("--query-codes", help="bank holding --id (defaults to --codes)")
    s.add_argument("--topk", type=int, default=10)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", parents=[common], help="mAP of a query bank vs a retrieval bank")
    s.add_argument("--query", required=True)
    s.add_argument("--retrieval", required=True)
    s.add_argument("--paper-ref", help=f"one of {sorted(PAPER_MAP)}")
    s.add_argument("--precision-at", default=",".join(map(str, DEFAULT_PRECISION_AT)))
    s.add_argument("--report", help="also write the report JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="end-to-end gradient check")
    s.add_argument("--instances", type=int, default=10)
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.add_argument("--max-entries", type=int, default=20)
    s.add_argument("--corrupt", action="store_true", help="double one gradient (test hook)")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, M.ConfigError, data.ManifestError, data.FormatError,
            CodeFormatError, BitsMismatchError, M.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (M.TrainingError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
