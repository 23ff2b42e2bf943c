"""``unlearnlab`` command line: gen, train, unlearn, eval, bench, report.

Exit codes: 0 on success, 1 when any cell or command fails, 2 on a config or
usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evalkit
from .config import ConfigError, ExperimentConfig, parse_config, validate
from .experiment import (
    StageError, cell_stem, evaluate, forget_spec, load_corpus, prepare_task, read_csv,
    rows_to_csv, run_bench, write_reports,
)
from .nnkit import load_model, save_model
from .speechgen import TASKS, corpus_to_text, select_forget
from .unlearn import METHODS, run_unlearn

log = logging.getLogger("unlearnlab")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _defaults_epilog():
    return "default configuration (an empty config file yields exactly this):\n\n" + "".join(
        f"  {line}\n" for line in ExperimentConfig().to_text().splitlines()
    ) + "\nper-method overrides: <method>.{lr,epochs,lambda,gamma,batch_size} = value"


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file (default: built-in defaults)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config out_dir, 'results')")
    common.add_argument("--seed", type=int, metavar="N", help="run a single seed, overriding the config seed list")
    common.add_argument("--task", choices=TASKS, help="restrict to one task (default: both)")
    common.add_argument("--method", metavar="NAME", help=f"unlearning method, one of: {', '.join(METHODS)}")
    common.add_argument("--forget-ratio", type=float, metavar="R", help="sample-unlearning ratio in [0, 0.10]")
    common.add_argument("--forget-class", type=int, metavar="C", help="class to forget (class unlearning)")
    common.add_argument("--full-sweep", action="store_true", help="ratios 1%%..10%% instead of 1%%, 5%%, 10%%")
    common.add_argument("--workers", type=int, metavar="N", help="parallel sweep workers (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="unlearnlab",
        description="Machine-unlearning experiments on a synthetic speech-classification corpus.",
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    kw = dict(parents=[common], epilog=_defaults_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub.add_parser("gen", help="generate the corpus and write it as text", **kw)
    sub.add_parser("train", help="train the original model for each task", **kw)
    p = sub.add_parser("unlearn", help="one train + unlearn + evaluate run", **kw)
    p.add_argument("--superloss", action="store_true", help="wrap the forgetting loss with SuperLoss")
    p = sub.add_parser("eval", help="evaluate a checkpoint on a forget partition", **kw)
    p.add_argument("--model", required=True, metavar="CKPT", help="checkpoint to evaluate")
    sub.add_parser("bench", help="full sweep: tasks x forget specs x methods x seeds", **kw)
    sub.add_parser("report", help="rebuild report files from results.csv and timings.csv", **kw)
    return parser


def load_config(args):
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_config(text)
    over = {}
    if args.out:
        over["out_dir"] = args.out
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.task:
        over["tasks"] = [args.task]
    if args.method:
        over["methods"] = [args.method]
    if args.forget_ratio is not None:
        over.update(forget_ratios=[args.forget_ratio], full_sweep=False)
        if args.forget_class is None:
            over["class_unlearning"] = False
    if args.forget_class is not None:
        over.update(forget_class=args.forget_class, class_unlearning=True)
        if args.forget_ratio is None:
            over["forget_ratios"] = []
    if args.full_sweep:
        over["full_sweep"] = True
    if args.workers is not None:
        over["workers"] = args.workers
    cfg = replace(cfg, **over)
    flag_keys = {"methods": "--method", "seeds": "--seed", "forget_ratios": "--forget-ratio",
                 "forget_class": "--forget-class", "workers": "--workers"}
    try:
        validate(cfg)
    except ConfigError as exc:
        if exc.key in flag_keys and exc.line is None:
            raise ConfigError(str(exc).replace(f"key {exc.key!r}", f"flag {flag_keys[exc.key]}")) from None
        raise
    return cfg


def cmd_gen(cfg, args):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg)
    (out / "corpus.txt").write_text(corpus_to_text(corpus))
    print(f"wrote {out / 'corpus.txt'}: {len(corpus.ids)} samples, "
          f"{corpus.num_keywords} keywords, {corpus.num_speakers} speakers")
    return EXIT_OK


def cmd_train(cfg, args):
    out = Path(cfg.out_dir) / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks:
        ctx = prepare_task(cfg, task)
        path = out / f"original_{task}.ckpt"
        save_model(ctx.original, path)
        acc = evalkit.subset_accuracy(ctx.original, ctx.base.test_ids, ctx.corpus, task)
        print(f"{task}: test accuracy {acc:.2f}% -> {path}")
    return EXIT_OK


def _single_partition(cfg, ctx, seed):
    if cfg.class_unlearning and not cfg.forget_ratios:
        section, ratio, fclass = "class", "", cfg.forget_class
    else:
        section, ratio, fclass = "sample", cfg.ratios()[0], ""
    part = select_forget(ctx.base, forget_spec(section, ratio, fclass, seed), ctx.corpus.labels(ctx.task))
    return section, ratio, fclass, part


def cmd_single(cfg, args):
    """One train, one unlearn, one evaluation; persists f, f' and the epoch trace."""
    if len(cfg.methods) != 1:
        raise ConfigError(f"unlearn needs exactly one method (--method); valid methods: {', '.join(METHODS)}")
    method, seed, task = cfg.methods[0], cfg.seeds[0], cfg.tasks[0]
    out = Path(cfg.out_dir)
    for sub in ("checkpoints", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ctx = prepare_task(cfg, task)
    section, ratio, fclass, part = _single_partition(cfg, ctx, seed)
    ucfg = cfg.unlearn_config(method, seed, superloss=True if args.superloss else None)
    res = run_unlearn(ctx.original, part, ctx.corpus, ucfg, cfg.train_settings())
    name = method + ("+superloss" if ucfg.superloss_enabled else "")
    stem = cell_stem(task, section, ratio, fclass, name, seed)
    save_model(ctx.original, out / "checkpoints" / f"original_{task}.ckpt")
    save_model(res.model, out / "checkpoints" / f"{stem}.ckpt")
    (out / "traces" / f"{stem}.tsv").write_text(res.trace_tsv())
    row = {"task": task, "section": section, "method": name, "ratio": ratio, "forget_class": fclass,
           "seed": seed, "status": "ok", "epochs_run": res.epochs_run, "error": "",
           **evaluate(res.model, part, ctx.corpus, task, int(fclass) if section == "class" else None)}
    text = rows_to_csv([row])
    (out / f"{stem}.csv").write_text(text)
    sys.stdout.write(text)
    if res.warning:
        log.warning("%s", res.warning)
    print(f"wall time {res.wall_time_seconds:.4f}s over {res.epochs_run} epochs", file=sys.stderr)
    return EXIT_OK


def cmd_eval(cfg, args):
    model = load_model(args.model)
    rows = []
    for task in cfg.tasks:
        ctx = prepare_task(cfg, task)
        if model.num_classes != ctx.corpus.num_classes(task):
            continue
        seed = cfg.seeds[0]
        section, ratio, fclass, part = _single_partition(cfg, ctx, seed)
        rows.append({"task": task, "section": section, "method": Path(args.model).stem, "ratio": ratio,
                     "forget_class": fclass, "seed": seed, "status": "ok", "error": "",
                     **evaluate(model, part, ctx.corpus, task, int(fclass) if section == "class" else None)})
    if not rows:
        print(f"error: checkpoint has {model.num_classes} classes, matching no selected task", file=sys.stderr)
        return EXIT_FAILED
    sys.stdout.write(rows_to_csv(rows))
    return EXIT_OK


def cmd_bench(cfg, args):
    rows, timings = run_bench(cfg, cfg.out_dir)
    failed = [r for r in rows if r["status"] != "ok"]
    late = [t for t in timings if not t["within_budget"]]
    print(f"{len(rows)} rows ({len(failed)} failed) -> {cfg.out_dir}")
    for t in late:
        log.warning("over budget: %s %s %s ratio=%s seed=%s", t["task"], t["section"], t["method"], t["ratio"], t["seed"])
    return EXIT_FAILED if failed else EXIT_OK


def cmd_report(cfg, args):
    out = Path(cfg.out_dir)
    rows, timings = read_csv(out / "results.csv"), read_csv(out / "timings.csv")
    write_reports(rows, timings, out)
    sys.stdout.write((out / "report.md").read_text())
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "unlearn": cmd_single,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
