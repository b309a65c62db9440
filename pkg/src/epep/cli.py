"""Command-line entry point: ``epep train|eval|synth|params|verify``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from .config import METHODS, RunConfig
from .data import MissingProtocol, SyntheticTask, load_jsonl, make_split, write_jsonl
from .errors import ConfigError, EpepError, TrainingError
from .model import model_from_state, model_state
from .prompting import param_report
from .serialization import dumps, read_checkpoint, write_checkpoint
from .training import HISTORY_FIELDS, evaluate, history_csv, load_splits, train

CHECKPOINT = "checkpoint.json"
METRICS = "metrics.csv"
RESOLVED_CONFIG = "config.json"


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        seed=args.seed,
        method=args.method,
        loss=args.loss,
        out_dir=args.out,
        **{"optim.epochs": args.epochs, "optim.warmup_epochs": args.warmup_epochs},
    )


def _save_run(out: Path, cfg: RunConfig, model, history: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    epoch = history[-1]["epoch"] if history else 0
    write_checkpoint(out / CHECKPOINT, "model", {"config": cfg.to_dict(), "epoch": epoch, "model": model_state(model)})
    (out / METRICS).write_text(history_csv(history))
    (out / RESOLVED_CONFIG).write_text(dumps(cfg.to_dict()))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir or ".")
    try:
        result = train(cfg)
    except TrainingError as err:
        if getattr(err, "model", None) is not None:
            _save_run(out, cfg, err.model, err.history)
            print(f"error: {err}; last good state written to {out / CHECKPOINT}", file=sys.stderr)
            return 3
        raise
    _save_run(out, cfg, result.model, result.history)
    last = result.history[-1]
    print(f"wrote {out / CHECKPOINT}, {out / METRICS}, {out / RESOLVED_CONFIG}")
    print(f"epoch {last['epoch']}: f1_macro={last['f1_macro']:.4f} auroc={last['auroc']:.4f}")
    return 0


def _csv_row(row: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def cmd_eval(args) -> int:
    doc = read_checkpoint(args.checkpoint, "model")
    cfg = RunConfig.from_dict(doc["config"])
    model = model_from_state(doc["model"])
    if args.data:
        enc = model.cfg
        data = load_jsonl(args.data, enc.num_classes, enc.text_len, enc.num_patches, enc.patch_dim)
        split = "eval"
    else:
        data = load_splits(cfg).test
        split = "test"
    report = evaluate(model, data, cfg.loss, cfg.lam)
    row = report.row(int(doc.get("epoch", 0)), split)
    payload = dumps({"epoch": row["epoch"], "split": split, "report": report.to_dict()})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(payload)
        (out / "eval.csv").write_text(_csv_row(row))
    sys.stdout.write(payload)
    return 0


def _parse_protocol(text: str) -> tuple[float, float]:
    try:
        t, i = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TEXT,IMAGE availabilities, got {text!r}") from None
    return t, i


def cmd_synth(args) -> int:
    task = SyntheticTask(num_classes=args.num_classes, noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for avail in args.protocol or [(0.7, 0.7)]:
        data = make_split(task, args.n, MissingProtocol(avail), args.seed, args.split)
        path = out / f"{args.split}_t{avail[0]:g}_i{avail[1]:g}.jsonl"
        write_jsonl(data, path)
        incomplete = int(data.missing.any(axis=1).sum())
        print(f"wrote {path}: {len(data)} samples, {incomplete} incomplete")
    return 0


def cmd_params(args) -> int:
    try:
        rows = param_report(args.m, args.d, args.l, args.r)
    except ConfigError as err:
        from .prompting import param_count

        for method in ("MAP", "MSP"):
            print(f"{method:<5} {param_count(args.m, args.d, args.l, method=method):>10}")
        print(f"EPEP  error: {err}", file=sys.stderr)
        return 2
    print(f"{'method':<6} {'params':>10}  {'complexity':<10} note")
    for r in rows:
        print(f"{r.method:<6} {r.count:>10}  {r.complexity:<10} {r.note}".rstrip())
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suites

    try:
        results = run_suites(args.suite)
    except KeyError as err:
        raise ConfigError(err.args[0]) from None
    for s in results:
        print(s.line())
    return 0 if all(s.ok for s in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epep", description="Evidential low-rank prompting for missing-modality classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="warm up, freeze and prompt-tune a model")
    p.add_argument("config", nargs="?", help="JSON run config (defaults used when omitted)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--loss", choices=("evidential", "ce"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="JSONL dataset; default regenerates the run's test split")
    p.add_argument("--out", help="directory for eval.json and eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write synthetic JSONL datasets")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--protocol", type=_parse_protocol, action="append", metavar="TEXT,IMAGE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="synthetic")
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("params", help="prompt parameter counts")
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--l", type=int, default=16)
    p.add_argument("--r", type=int, default=4)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("verify", help="run the oracle and gradient suites")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EpepError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
