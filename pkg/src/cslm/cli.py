"""Command-line entry point: generate / stats / train / eval / sweep / analyze.

Config precedence everywhere: command-line flag > config file > built-in
default (the built-ins are the published recipe's values). Config and grid
files are flat `key = value` text; grid files may give comma-separated value
lists for the swept keys. Every artifact-producing run writes a manifest
with resolved config, seed, and file checksums. Exit codes: 0 success,
1 validation error, 2 runtime failure. CSLM_LOG sets log verbosity.
"""

import argparse
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, analysis, corpus, kernels, synthgen, trainer
from .model import ConfigError, ModelConfig, MultiTaskLm
from .trainer import TrainConfig

log = logging.getLogger("cslm")


class UsageError(ValueError):
    """Bad command line (unknown flag, missing subcommand, bad value)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


# --------------------------------------------------------------------------
# Config files: flat `key = value`, '#' comments, blank lines ignored.


def parse_config_file(path):
    pairs = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _coerce(value, typ, key):
    if typ is bool:
        word = str(value).lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return _BOOL_WORDS[word]
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}") from None


def build_dataclass(cls, file_pairs, flag_pairs, used=None):
    """Defaults <- config file <- explicit flags, for one config dataclass."""
    values = {}
    for f in dataclasses.fields(cls):
        if f.name in file_pairs:
            values[f.name] = _coerce(file_pairs[f.name], type(getattr(cls(), f.name)), f.name)
            if used is not None:
                used.add(f.name)
        if flag_pairs.get(f.name) is not None:
            values[f.name] = flag_pairs[f.name]
    return cls(**values)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(path, command, config, inputs=(), outputs=(), extra=None):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "kernel_backend": kernels.backend(),
        "config": config,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs},
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Data path conventions shared by train/eval/analyze.

SPLITS = ("train", "dev", "test")


def split_paths(data_dir, split):
    if split not in SPLITS:
        raise UsageError(f"split must be one of {SPLITS}, got {split!r}")
    d = Path(data_dir)
    words = d / f"{split}.words"
    tags = d / f"{split}.tags"
    for p in (words, tags):
        if not p.exists():
            raise FileNotFoundError(f"missing corpus file: {p}")
    return words, tags


def load_split(data_dir, split):
    words, tags = split_paths(data_dir, split)
    return corpus.load_tagged_corpus(words, tags), (words, tags)


# --------------------------------------------------------------------------
# Subcommands.


def cmd_generate(args):
    file_pairs = parse_config_file(args.config) if args.config else {}
    flag_pairs = {
        "seed": args.seed,
        "n_train": args.n_train,
        "n_dev": args.n_dev,
        "n_test": args.n_test,
        "vocab_per_pos": args.vocab_per_pos,
        "switch_prob": args.switch_prob,
        "island_len": args.island_len,
        "matrix_lang": args.matrix_lang,
    }
    cfg = build_dataclass(synthgen.SynthConfig, file_pairs, flag_pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = synthgen.generate(cfg)
    written = []
    for split in SPLITS:
        words = out / f"{split}.words"
        tags = out / f"{split}.tags"
        corpus.save_tagged_corpus(result.split(split), words, tags)
        written += [words, tags]
    write_run_manifest(
        out / "manifest.json",
        "generate",
        dataclasses.asdict(cfg),
        outputs=written,
        extra={"realized_stats": result.manifest["realized_stats"]},
    )
    log.info("wrote %d files under %s", len(written) + 1, out)
    print(out / "manifest.json")
    return 0


def cmd_stats(args):
    utts = corpus.load_tagged_corpus(args.words, args.tags)
    stats = corpus.compute_stats(utts)
    payload = json.dumps(stats.to_dict())
    print(payload)
    if args.out:
        Path(args.out).write_text(payload + "\n")
        write_run_manifest(
            str(args.out) + ".manifest.json",
            "stats",
            {"words": str(args.words), "tags": str(args.tags)},
            inputs=[args.words, args.tags],
            outputs=[args.out],
        )
    return 0


def _train_flag_pairs(args):
    return {
        # ModelConfig
        "mode": args.mode,
        "hidden_size": args.hidden_size,
        "num_layers": args.num_layers,
        "dropout_word": args.dropout_word,
        "dropout_pos": args.dropout_pos,
        "loss_weight": args.p,
        "stop_gradient_into_pos_tower": args.stop_gradient,
        # TrainConfig
        "lr0": args.lr0,
        "decay": args.decay,
        "clip": args.clip,
        "batch_size": args.batch_size,
        "unroll": args.unroll,
        "max_epochs": args.max_epochs,
        "seed": args.seed,
    }


def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data", required=True, help="directory with <split>.words/.tags")
    p.add_argument("--mode", choices=("multitask", "lm_plus_syntactic", "lm_only"))
    p.add_argument("--hidden-size", type=int, dest="hidden_size")
    p.add_argument("--num-layers", type=int, dest="num_layers")
    p.add_argument("--dropout-word", type=float, dest="dropout_word")
    p.add_argument("--dropout-pos", type=float, dest="dropout_pos")
    p.add_argument("--p", type=float, help="word-LM weight in the joint loss")
    p.add_argument(
        "--stop-gradient",
        type=lambda s: _coerce(s, bool, "--stop-gradient"),
        dest="stop_gradient",
        help="block word-loss gradients into the tag tower (true/false)",
    )
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--unroll", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--seed", type=int)
    p.add_argument("--min-count", type=int, dest="min_count", default=1)


def _build_plans(data_dir, model_cfg_or_none, train_cfg, min_count, splits=("train", "dev")):
    train_utts, train_files = load_split(data_dir, "train")
    vocab_w = corpus.build_vocab(train_utts, min_count=min_count, stream="words")
    vocab_p = corpus.build_vocab(train_utts, min_count=1, stream="tags")
    plans = {}
    files = list(train_files)
    for split in splits:
        if split == "train":
            utts = train_utts
        else:
            utts, split_files = load_split(data_dir, split)
            files += list(split_files)
        plans[split] = corpus.make_batches(
            utts, vocab_w, vocab_p, train_cfg.batch_size, train_cfg.unroll
        )
    return plans, vocab_w, vocab_p, files


def cmd_train(args):
    file_pairs = parse_config_file(args.config) if args.config else {}
    flags = _train_flag_pairs(args)
    used = set()
    model_cfg = build_dataclass(ModelConfig, file_pairs, flags, used)
    train_cfg = build_dataclass(TrainConfig, file_pairs, flags, used)
    unknown = set(file_pairs) - used - {"min_count"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    min_count = int(file_pairs.get("min_count", args.min_count))

    plans, vocab_w, vocab_p, files = _build_plans(
        args.data, model_cfg, train_cfg, min_count
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = MultiTaskLm(model_cfg, len(vocab_w), len(vocab_p), seed=train_cfg.seed)
    log.info(
        "training %s: h=%d, %d parameters, %d train windows",
        model_cfg.mode, model_cfg.hidden_size, model.num_params(),
        plans["train"].n_windows,
    )
    result = trainer.train(
        model,
        plans["train"],
        plans["dev"],
        train_cfg,
        metrics_path=out / "metrics.jsonl",
        ckpt_path=out / "best.ckpt",
        word_vocab=vocab_w,
        tag_vocab=vocab_p,
        log=log.info,
    )
    config = {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "min_count": min_count,
        "data": str(args.data),
        "n_words": len(vocab_w),
        "n_tags": len(vocab_p),
    }
    if args.config:
        files.append(Path(args.config))
    write_run_manifest(
        out / "manifest.json",
        "train",
        config,
        inputs=files,
        outputs=[out / "best.ckpt", out / "metrics.jsonl"],
        extra={
            "best_epoch": result.best_epoch,
            "best_dev_ppl_lm": result.best_dev_ppl_lm,
            "final_lr": result.final_lr,
        },
    )
    print(f"best_dev_ppl_lm = {result.best_dev_ppl_lm:.6f} (epoch {result.best_epoch})")
    print(out / "best.ckpt")
    return 0


def cmd_eval(args):
    loaded = analysis.load_model(args.ckpt)
    utts, files = load_split(args.data, args.split)
    if loaded.tag_vocab is None:
        raise analysis.CompatibilityError("checkpoint carries no tag vocabulary")
    plan = corpus.make_batches(
        utts, loaded.word_vocab, loaded.tag_vocab, args.batch_size, args.unroll
    )
    ppl = trainer.perplexity(loaded.model, plan)
    print(f"ppl_lm = {ppl.ppl_lm:.6f}")
    print(f"ppl_total = {ppl.ppl_total:.6f}")
    if args.out:
        Path(args.out).write_text(
            json.dumps({"ppl_lm": ppl.ppl_lm, "ppl_total": ppl.ppl_total}) + "\n"
        )
        write_run_manifest(
            str(args.out) + ".manifest.json",
            "eval",
            {
                "ckpt": str(args.ckpt),
                "split": args.split,
                "batch_size": args.batch_size,
                "unroll": args.unroll,
            },
            inputs=[args.ckpt, *files],
            outputs=[args.out],
        )
    return 0


def _parse_grid(path):
    """Grid file: swept keys may hold comma-separated lists."""
    pairs = parse_config_file(path)
    sweep_keys = (
        "mode", "hidden_size", "loss_weight", "seed", "dropout_word", "dropout_pos",
        "stop_gradient_into_pos_tower",
    )
    fixed = {k: v for k, v in pairs.items() if k not in sweep_keys}
    swept = {}
    model_defaults = ModelConfig()
    for key in sweep_keys:
        if key not in pairs:
            continue
        default = getattr(model_defaults, key, 0)
        typ = type(default) if key != "seed" else int
        swept[key] = [_coerce(v.strip(), typ, key) for v in pairs[key].split(",")]
    cells = [
        dict(zip(swept.keys(), combo))
        for combo in itertools.product(*swept.values())
    ]
    return fixed, cells or [{}]


def cmd_sweep(args):
    fixed, cells = _parse_grid(args.grid)
    train_cfg = build_dataclass(TrainConfig, fixed, {})
    min_count = int(fixed.get("min_count", 1))
    plans, vocab_w, vocab_p, files = _build_plans(
        args.data, None, train_cfg, min_count, splits=("train", "dev", "test")
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_model = {
        k: v for k, v in fixed.items()
        if k in {f.name for f in dataclasses.fields(ModelConfig)}
    }
    full_cells = []
    for cell in cells:
        merged = dict(base_model)
        merged.update({k: v for k, v in cell.items() if k != "seed"})
        model_cfg = build_dataclass(ModelConfig, merged, {})
        c = dataclasses.asdict(model_cfg)
        if "seed" in cell:
            c["seed"] = cell["seed"]
        full_cells.append(c)
    rows = trainer.sweep(
        full_cells, plans["train"], plans["dev"], plans["test"],
        len(vocab_w), len(vocab_p), train_cfg, log=log.info,
    )
    results = out / "results.csv"
    with open(results, "w", encoding="utf-8") as f:
        f.write(",".join(trainer.SWEEP_FIELDS) + "\n")
        for row in rows:
            f.write(
                ",".join(
                    "" if row[k] is None else str(row[k]).replace(",", ";")
                    for k in trainer.SWEEP_FIELDS
                )
                + "\n"
            )
    write_run_manifest(
        out / "manifest.json",
        "sweep",
        {"grid": str(args.grid), "fixed": fixed, "n_cells": len(rows)},
        inputs=[args.grid, *files],
        outputs=[results],
    )
    print(results)
    return 0


def _select_utterances(utts, ids_arg, top, key=None):
    if ids_arg:
        try:
            wanted = [int(s) for s in ids_arg.split(",")]
        except ValueError:
            raise UsageError(f"--ids expects comma-separated integers, got {ids_arg!r}")
        bad = [i for i in wanted if not 0 <= i < len(utts)]
        if bad:
            raise UsageError(f"--ids out of range (corpus has {len(utts)} utterances): {bad}")
        return wanted
    return None  # resolved later (possibly by top-k on computed deltas)


def cmd_analyze_compare(args):
    a = analysis.load_model(args.a)
    b = analysis.load_model(args.b)
    utts, files = load_split(args.data, args.split)
    wanted = _select_utterances(utts, args.ids, args.top)
    if wanted is not None:
        utts = [utts[i] for i in wanted]
    rows = analysis.compare_models(a, b, utts)
    if wanted is None and args.top:
        rows.sort(key=lambda d: -abs(float(d.delta.sum())))
        rows = rows[: args.top]
    analysis.write_compare_csv(rows, args.out)
    write_run_manifest(
        str(args.out) + ".manifest.json",
        "analyze compare",
        {"a": str(args.a), "b": str(args.b), "split": args.split,
         "ids": args.ids, "top": args.top},
        inputs=[args.a, args.b, *files],
        outputs=[args.out],
    )
    print(args.out)
    return 0


def cmd_analyze_nextlang(args):
    loaded = analysis.load_model(args.ckpt)
    utts, files = load_split(args.data, args.split)
    wanted = _select_utterances(utts, args.ids, None)
    if wanted is not None:
        utts = [utts[i] for i in wanted]
    rows = analysis.next_lang_probability(loaded, utts)
    analysis.write_nextlang_csv(rows, args.out)
    write_run_manifest(
        str(args.out) + ".manifest.json",
        "analyze nextlang",
        {"ckpt": str(args.ckpt), "split": args.split, "ids": args.ids},
        inputs=[args.ckpt, *files],
        outputs=[args.out],
    )
    print(args.out)
    return 0


def cmd_analyze_triggers(args):
    utts, files = load_split(args.data, args.split)
    rows = analysis.trigger_table(utts)
    analysis.write_triggers_csv(rows, args.out)
    write_run_manifest(
        str(args.out) + ".manifest.json",
        "analyze triggers",
        {"split": args.split},
        inputs=files,
        outputs=[args.out],
    )
    print(args.out)
    return 0


# --------------------------------------------------------------------------
# Parser wiring and dispatch.


def build_parser():
    parser = _Parser(prog="cslm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cslm {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="generate a synthetic code-switched corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-dev", type=int, dest="n_dev")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--vocab-per-pos", type=int, dest="vocab_per_pos")
    p.add_argument("--switch-prob", type=float, dest="switch_prob")
    p.add_argument("--island-len", type=float, dest="island_len")
    p.add_argument("--matrix-lang", choices=("en", "zh"), dest="matrix_lang")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="switch statistics of a words/tags file pair")
    p.add_argument("--words", required=True)
    p.add_argument("--tags", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int, dest="batch_size", default=20)
    p.add_argument("--unroll", type=int, default=35)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid of training runs")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="model and corpus diagnostics")
    asub = p.add_subparsers(dest="analysis_command")

    q = asub.add_parser("compare", help="per-token log-prob deltas of two checkpoints")
    q.add_argument("--a", required=True, help="checkpoint whose improvement is measured")
    q.add_argument("--b", required=True, help="baseline checkpoint")
    q.add_argument("--data", required=True)
    q.add_argument("--split", default="test")
    q.add_argument("--out", required=True)
    q.add_argument("--ids", help="comma-separated utterance indices")
    q.add_argument("--top", type=int, help="keep top-k utterances by |sum delta|")
    q.set_defaults(func=cmd_analyze_compare)

    q = asub.add_parser("nextlang", help="P(next tag is zh) per token")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--split", default="test")
    q.add_argument("--out", required=True)
    q.add_argument("--ids")
    q.set_defaults(func=cmd_analyze_nextlang)

    q = asub.add_parser("triggers", help="trigger-tag frequency table")
    q.add_argument("--data", required=True)
    q.add_argument("--split", default="train")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_analyze_triggers)

    return parser


def _setup_logging():
    level = os.environ.get("CSLM_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )


VALIDATION_ERRORS = (
    UsageError,
    ConfigError,
    corpus.CorpusFormatError,
    corpus.CorpusSizeError,
    synthgen.SynthConfigError,
    analysis.CompatibilityError,
    analysis.UnsupportedModeError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    ValueError,
)


def dispatch(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_help(sys.stderr)
            return 1
        if args.command == "analyze" and getattr(args, "analysis_command", None) is None:
            print("analyze needs a subcommand: compare, nextlang, or triggers",
                  file=sys.stderr)
            return 1
        return args.func(args) or 0
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the CLI boundary maps everything
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
