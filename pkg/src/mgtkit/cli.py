"""Command line entry point.

Subcommands: ingest, stats, balance, audit, train, predict, evaluate,
report. Every subcommand accepts --seed, --config and --json. Exit codes:
0 success, 1 validation error (bad input, bad arguments), 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import arch_audit, evaluator, reporter, sampler, trainer
from .corpus import (
    group_counts,
    load_corpus,
    save_corpus,
    token_length_stats,
    TokenLengthStats,
)
from .tokenizers import get_tokenizer


class _Parser(argparse.ArgumentParser):
    # Argument problems, unknown subcommands included, are validation
    # errors (exit 1); argparse would default to 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(args, payload: dict, human_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.input, args.split)
    payload = {
        "path": corpus.path,
        "digest": corpus.digest,
        "records": len(corpus),
        "by_label": {str(k): v for k, v in sorted(corpus.label_counts().items())},
        "by_source": {k: v for k, v in sorted(group_counts(corpus, "source").items())},
    }
    _emit(args, payload, [
        f"loaded {len(corpus)} records from {corpus.path}",
        f"sha256 {corpus.digest}",
        "by label: " + ", ".join(f"{k}={v}" for k, v in sorted(corpus.label_counts().items())),
        "by source: " + ", ".join(f"{k}={v}" for k, v in payload["by_source"].items()),
    ])
    return 0


def cmd_stats(args) -> int:
    corpus = load_corpus(args.input, args.split)
    stats = token_length_stats(corpus, get_tokenizer(args.tokenizer), args.bucket_width)
    payload = stats.to_json()
    payload["records"] = len(corpus)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    lines = [f"records: {len(corpus)}", f"tokenizer: {stats.tokenizer}"]
    for label, s in sorted(stats.per_label.items()):
        lines.append(
            f"label {label}: count={s.count} mean={s.mean:.1f} "
            f"median={s.median:.1f} p95={s.p95:.1f} max={s.max}"
        )
    if args.out:
        lines.append(f"wrote {args.out}")
    _emit(args, payload, lines)
    return 0


def cmd_balance(args) -> int:
    if args.split != "train":
        raise ValueError(
            "balancing is a training-split operation; dev and test stay untouched"
        )
    corpus = load_corpus(args.input, args.split)
    spec = sampler.BalanceSpec(
        target_ratio=(args.ratio, 1.0 - args.ratio), seed=args.seed or 0
    )
    balanced = sampler.balance_downsample(corpus, spec, group_by=args.group_by)
    save_corpus(balanced, args.output)
    payload = {
        "input_counts": {str(k): v for k, v in sorted(corpus.label_counts().items())},
        "output_counts": {str(k): v for k, v in sorted(balanced.label_counts().items())},
        "output": str(args.output),
        "seed": spec.seed,
    }
    _emit(args, payload, [
        "before: " + ", ".join(f"{k}={v}" for k, v in sorted(corpus.label_counts().items())),
        "after:  " + ", ".join(f"{k}={v}" for k, v in sorted(balanced.label_counts().items())),
        f"wrote {args.output}",
    ])
    return 0


def cmd_audit(args) -> int:
    arch = arch_audit.ArchDescriptor.load(args.arch)
    plan = arch_audit.load_plan(args.plan, num_layers=arch.num_layers)
    if isinstance(plan, arch_audit.FreezePlan):
        audit = arch_audit.audit_freeze(arch, plan)
        ledger = arch_audit.freeze_ledger(arch, plan)
    else:
        audit = arch_audit.audit_lora(arch, plan)
        ledger = arch_audit.lora_ledger(arch, plan)
    enumerated = arch_audit.ledger_audit(ledger)
    if enumerated != audit:
        raise RuntimeError(
            f"closed-form audit {audit} disagrees with tensor enumeration {enumerated}"
        )
    head = arch_audit.head_params(arch.head)
    frac = 100.0 * audit.trainable_fraction
    frac_no_head = 100.0 * audit.trainable_params / (audit.total_params - head)
    if args.ledger:
        arch_audit.write_ledger_csv(ledger, args.ledger)
    payload = {
        "total_params": audit.total_params,
        "trainable_params": audit.trainable_params,
        "trainable_percent": frac,
        "trainable_percent_excluding_head": frac_no_head,
    }
    lines = [
        f"total parameters      {audit.total_params:,}",
        f"trainable parameters  {audit.trainable_params:,}",
        f"trainable fraction    {frac:.4f}%",
        f"trainable fraction    {frac_no_head:.4f}% (head excluded from denominator)",
    ]
    if args.ledger:
        lines.append(f"wrote per-tensor ledger to {args.ledger}")
    _emit(args, payload, lines)
    return 0


def _load_backend(name: str, seed: int):
    if name == "toy":
        from .toy_backend import ToyTransformerBackend

        return ToyTransformerBackend(seed=seed)
    raise ValueError(f"unknown backend {name!r} (only 'toy' is built in)")


def cmd_train(args) -> int:
    if not args.config:
        raise ValueError("train requires --config pointing at a TOML config")
    config = trainer.config_from_toml(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    train_corpus = load_corpus(args.train, "train")
    valid_corpus = load_corpus(args.valid, "dev")
    backend = _load_backend(args.backend, seed=config.seed)
    handle, logs = trainer.train(backend, train_corpus, valid_corpus, config, args.out)
    payload = {
        "checkpoint": str(handle.path),
        "best_epoch": handle.best_epoch,
        "epochs": [
            {
                "epoch": log.epoch,
                "train_loss": log.train_loss,
                "valid_loss": log.valid_loss,
                "valid_macro_f1": log.valid_macro_f1,
            }
            for log in logs
        ],
    }
    lines = ["epoch  train_loss  valid_loss  macro_f1"]
    for log in logs:
        lines.append(
            f"{log.epoch:>5}  {log.train_loss:>10.4f}  {log.valid_loss:>10.4f}"
            f"  {log.valid_macro_f1:>8.4f}"
        )
    lines.append(f"best epoch {handle.best_epoch}; checkpoint at {handle.path}")
    _emit(args, payload, lines)
    return 0


def cmd_predict(args) -> int:
    backend = trainer.load_checkpoint(args.checkpoint)
    config = trainer.config_from_toml(Path(args.checkpoint) / "config.toml")
    max_tokens = args.max_tokens or config.truncation.max_tokens
    corpus = load_corpus(args.input, args.split)
    preds = evaluator.predict(
        backend, corpus, trainer.TruncationPolicy(max_tokens), batch_size=args.batch_size
    )
    evaluator.write_predictions(preds, args.output)
    machine = sum(p.label for p in preds)
    payload = {"predictions": len(preds), "machine": machine, "output": str(args.output)}
    _emit(args, payload, [
        f"wrote {len(preds)} predictions ({machine} machine) to {args.output}",
    ])
    return 0


def cmd_evaluate(args) -> int:
    gold = load_corpus(args.gold, args.split)
    preds = evaluator.read_predictions(args.preds)
    pred_labels, _ = evaluator.paired_labels(gold, preds)
    fields = tuple(f for f in args.breakdown.split(",") if f) if args.breakdown else ()
    report = evaluator.evaluate(gold, pred_labels, fields=fields)
    payload = report.to_json()
    if args.out_dir:
        import csv

        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        for fieldname, groups in report.per_group.items():
            with (out_dir / f"breakdown_{fieldname}.csv").open(
                "w", encoding="utf-8", newline=""
            ) as f:
                w = csv.writer(f)
                w.writerow(["group", "count", "accuracy", "f1_macro"])
                for name, m in sorted(groups.items(), key=lambda kv: (-kv[1].f1_macro, kv[0])):
                    w.writerow([name, m.count, repr(m.accuracy), repr(m.f1_macro)])
    lines = [
        f"f1_macro  {report.f1_macro:.4f}",
        f"f1_micro  {report.f1_micro:.4f}",
        f"accuracy  {report.accuracy:.4f}",
        f"confusion tn={report.confusion.tn} fp={report.confusion.fp} "
        f"fn={report.confusion.fn} tp={report.confusion.tp}",
    ]
    if args.out_dir:
        lines.append(f"wrote metrics.json to {args.out_dir}")
    _emit(args, payload, lines)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.exists():
        raise ValueError(f"{metrics_path} not found (run 'evaluate --out-dir' first)")
    report = evaluator.MetricReport.from_json(
        json.loads(metrics_path.read_text(encoding="utf-8"))
    )
    stats = None
    stats_path = run_dir / "stats.json"
    if stats_path.exists():
        stats = TokenLengthStats.from_json(json.loads(stats_path.read_text(encoding="utf-8")))
    config_path = run_dir / "config.toml"
    manifest = reporter.emit_report(
        report,
        stats,
        args.out_dir,
        config_path=config_path if config_path.exists() else None,
        figures=args.figures,
    )
    payload = {"out_dir": str(args.out_dir), "manifest": manifest}
    _emit(args, payload, [
        f"wrote {len(manifest['files'])} files to {args.out_dir}",
    ])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--config", default=None, help="TOML config file")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    parser = _Parser(prog="mgtkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate a JSONL corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="train", choices=("train", "dev", "test"))
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", parents=[common], help="token-length statistics")
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="train", choices=("train", "dev", "test"))
    p.add_argument("--tokenizer", default="bytes", choices=("bytes", "whitespace"))
    p.add_argument("--bucket-width", type=int, default=64)
    p.add_argument("--out", default=None, help="write stats JSON here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("balance", parents=[common], help="downsample to a class ratio")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--split", default="train", choices=("train", "dev", "test"))
    p.add_argument("--ratio", type=float, default=0.5,
                   help="target share of the human class (label 0)")
    p.add_argument("--group-by", default=None, choices=("source", "generator", "language"))
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("audit", parents=[common], help="parameter audit for a plan")
    p.add_argument("--arch", required=True, help="architecture descriptor JSON")
    p.add_argument("--plan", required=True, help="freeze or LoRA plan JSON")
    p.add_argument("--ledger", default=None, help="write per-tensor CSV here")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", parents=[common], help="fine-tune a backend")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--backend", default="toy")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="label a corpus from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--output", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-tokens", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against gold")
    p.add_argument("--preds", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--breakdown", default="source,generator,language",
                   help="comma-separated record fields, or '' for none")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="render figures and a manifest")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--figures", default="all", choices=reporter.FIGURE_SETS)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


dispatch = main


if __name__ == "__main__":
    sys.exit(main())
