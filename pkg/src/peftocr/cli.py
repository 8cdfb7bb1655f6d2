"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .config import TrainConfig, load_config
from .data import CorpusSpec, build_corpus, build_pretrain_corpus, load_manifest
from .errors import ConfigurationError, PeftOcrError, TrainingDivergenceError
from .metrics import format_aligned, format_delimited, parse_delimited
from .model import count_parameters, inject_adapters, merge_all
from .training import (
    ablation_table,
    ablation_tsv,
    check_compatible,
    evaluate,
    load_base,
    model_config_for,
    prepare_finetune,
    pretrain,
    run_ablation,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _strategy(value: str) -> tuple[str, str]:
    parts = value.split("/")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected ENCODER/DECODER, e.g. dora/lora")
    return parts[0], parts[1]


def _train_config(args, **defaults) -> TrainConfig:
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "batch": getattr(args, "batch", None),
        "seed": getattr(args, "seed", None),
        "rank": getattr(args, "rank", None),
    }
    strategy = getattr(args, "strategy", None)
    if strategy:
        overrides["encoder"], overrides["decoder"] = strategy
    if getattr(args, "config", None):
        return load_config(args.config, **(defaults | {k: v for k, v in overrides.items() if v is not None}))
    return TrainConfig(**(defaults | {k: v for k, v in overrides.items() if v is not None}))


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")


# --------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = CorpusSpec(args.lines, args.min_len, args.max_len, seed=args.seed, test_count=args.test_lines)
    build = build_pretrain_corpus if args.printed_only else build_corpus
    manifest = build(spec, args.out)
    print(json.dumps(manifest.statistics(), sort_keys=True))
    return EXIT_OK


def _save_epochs(out: str, every: int, vocab):
    if not every:
        return None

    def hook(epoch, model):
        if epoch % every == 0:
            checkpoint.save(f"{out}.epoch{epoch}", model, vocab)

    return hook


def _run_training(fn, out: str, vocab, log_path: str | None, meta: dict) -> int:
    result = fn()
    checkpoint.save(out, result.model, vocab, meta | {"best_epoch": result.best_epoch})
    _write(log_path, result.log_text)
    print(f"saved {out} (best epoch {result.best_epoch}, "
          f"final val CER {result.val_cer[-1] if result.val_cer else float('nan'):.4f})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    manifest = load_manifest(args.data)
    cfg = _train_config(args, encoder="full_ft", decoder="full_ft", lr=1e-3)
    model_cfg = model_config_for(manifest, **cfg.model_overrides)
    holder = {}

    def run():
        from .model import OcrModel

        model = OcrModel.initialize(model_cfg, seed=cfg.seed)
        holder["model"] = model
        return train(model, manifest, cfg.with_strategy("full_ft", "full_ft"),
                     on_epoch=_save_epochs(args.out, cfg.checkpoint_every, manifest.vocab))

    return _guarded(run, holder, args.out, manifest.vocab, args.log, {"phase": "pretrain"})


def _guarded(run, holder, out, vocab, log_path, meta) -> int:
    try:
        return _run_training(run, out, vocab, log_path, meta)
    except TrainingDivergenceError as exc:
        model = holder.get("model")
        if exc.last_good is not None and model is not None:
            model.restore(exc.last_good)
            checkpoint.save(out + ".lastgood", model, vocab, meta)
        raise


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    base, vocab = load_base(args.base)
    check_compatible(base, vocab, manifest)
    cfg = _train_config(args)
    holder = {"model": prepare_finetune(base, cfg)}

    def run():
        return train(holder["model"], manifest, cfg, on_epoch=_save_epochs(args.out, cfg.checkpoint_every, vocab))

    meta = {"phase": "finetune", "strategy": f"{cfg.encoder}/{cfg.decoder}", "lr": cfg.learning_rate}
    return _guarded(run, holder, args.out, vocab, args.log, meta)


def cmd_eval(args) -> int:
    model, vocab, _ = checkpoint.load(args.checkpoint)
    manifest = load_manifest(args.data)
    report = evaluate(model, manifest, args.split, vocab=vocab)
    print(report.to_table(), end="")
    _write(args.out, report.to_tsv())
    return EXIT_OK


def cmd_merge(args) -> int:
    model, vocab, meta = checkpoint.load(args.checkpoint)
    merged = len(model.adapters)
    merge_all(model)
    checkpoint.save(args.out, model, vocab, meta | {"merged_from": str(args.checkpoint)})
    print(f"merged {merged} adapter sites into {args.out}")
    return EXIT_OK


def cmd_count_params(args) -> int:
    model, _, _ = checkpoint.load(args.checkpoint)
    if args.strategy:
        if args.rank is None and any(s in ("lora", "dora") for s in args.strategy):
            raise ConfigurationError("--rank is required with an adapter strategy")
        inject_adapters(model, *args.strategy, rank=args.rank)
    counts = count_parameters(model)
    row = {"encoder": model.strategy["encoder"], "decoder": model.strategy["decoder"],
           "adapter_sites": len(model.adapters), **counts}
    print(format_aligned([row]) if args.format == "table" else format_delimited([row]), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.data)
    base, vocab = load_base(args.base)
    check_compatible(base, vocab, manifest)
    cfg = _train_config(args, rank=args.rank or 4)
    rows, results = run_ablation(base, manifest, cfg, max_steps=args.max_steps)
    _write(args.out, ablation_tsv(rows))
    if args.log:
        _write(args.log, "".join(r.log_text for r in results))
    print(ablation_table(rows), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    for i, path in enumerate(args.files):
        rows = parse_delimited(Path(path).read_text(encoding="utf-8"), args.input_delimiter)
        if len(args.files) > 1:
            print(("\n" if i else "") + f"== {path}")
        if args.format == "table":
            print(format_aligned(rows), end="")
        else:
            print(format_delimited(rows, "," if args.format == "csv" else "\t"), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="peftocr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--lines", type=int, required=True)
    g.add_argument("--min-len", type=int, default=3)
    g.add_argument("--max-len", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-lines", type=int, default=None)
    g.add_argument("--printed-only", action="store_true", help="pre-training corpus (printed style only)")
    g.set_defaults(func=cmd_gen_data)

    def training_opts(sp, strategy=True):
        sp.add_argument("--config")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rank", type=int)
        if strategy:
            sp.add_argument("--strategy", type=_strategy, help="ENCODER/DECODER, e.g. dora/lora")
        sp.add_argument("--log")

    t = sub.add_parser("pretrain", help="train the shared base model from scratch")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    training_opts(t, strategy=False)
    t.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="fine-tune a base checkpoint with a strategy pair")
    t.add_argument("--base", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    training_opts(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", help="write the report as TSV")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="fold adapters into dense weights")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    c = sub.add_parser("count-params", help="trainable / total parameter counts")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--strategy", type=_strategy, help="inject this strategy before counting")
    c.add_argument("--rank", type=int)
    c.add_argument("--format", choices=("table", "tsv"), default="table")
    c.set_defaults(func=cmd_count_params)

    a = sub.add_parser("ablate", help="run the 11-row encoder/decoder strategy grid")
    a.add_argument("--base", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--max-steps", type=int)
    training_opts(a, strategy=False)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="render TSV reports as tables")
    r.add_argument("files", nargs="+")
    r.add_argument("--format", choices=("table", "tsv", "csv"), default="table")
    r.add_argument("--input-delimiter", default="\t")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except PeftOcrError as exc:
        print(f"peftocr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"peftocr: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
