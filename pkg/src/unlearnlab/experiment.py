"""Sweep orchestration: tasks x forget specs x seeds x methods.

Per task the corpus is generated (or loaded), split once and the original
model trained once. Each (forget spec, seed) pair is a *group*: it builds the
partition, runs the retrain oracle first to fix the time budget, then every
unlearning method. Groups are independent and may run in a process pool;
rows are merged in a fixed order regardless of completion order.
"""
from __future__ import annotations

import csv
import io
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import evalkit
from .nnkit import save_model
from .speechgen import TASKS, ForgetSpec, corpus_from_text, generate, select_forget, split
from .unlearn import METHODS, run_unlearn, train

log = logging.getLogger(__name__)

RESULT_FIELDS = (
    "task", "section", "method", "ratio", "forget_class", "seed", "status",
    "acc_test", "acc_forget", "acc_retain", "acc_forget_test", "chance", "mia",
    "epochs_run", "error",
)
TIMING_FIELDS = ("task", "section", "method", "ratio", "seed", "wall_time", "budget", "within_budget",
                 "stopped_by_budget")
SECTION_ORDER = ("original", "sample", "class")


class StageError(RuntimeError):
    """A pipeline stage outside the per-cell isolation failed."""

    def __init__(self, stage, cfg, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}\n--- config ---\n{cfg.to_text()}")
        self.stage = stage


@dataclass
class TaskContext:
    task: str
    corpus: object
    base: object  # train/test Partition, forget set empty
    original: object


def load_corpus(cfg):
    if cfg.corpus_path:
        return corpus_from_text(Path(cfg.corpus_path).read_text())
    return generate(cfg.gen_spec())


def _stage(name, cfg, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        raise StageError(name, cfg, exc) from exc


def prepare_task(cfg, task, corpus=None):
    if corpus is None:
        corpus = _stage("generate", cfg, load_corpus, cfg)
    base = _stage("split", cfg, split, corpus, cfg.test_fraction, cfg.data_seed, task)
    original = _stage("train", cfg, train, corpus, base, cfg.train_settings(), cfg.train_seed)
    return TaskContext(task, corpus, base, original)


def method_names(cfg):
    names = [m for m in METHODS if m in cfg.methods]
    if cfg.superloss_rows and cfg.superloss_base in cfg.methods:
        names.append(f"{cfg.superloss_base}+superloss")
    return names


def groups_for(cfg):
    """(section, ratio, forget_class) triples in report order."""
    out = [("sample", r, "") for r in cfg.ratios()]
    if cfg.class_unlearning:
        out.append(("class", "", cfg.forget_class))
    return out


def forget_spec(section, ratio, forget_class, seed):
    if section == "sample":
        return ForgetSpec("sample", float(ratio), seed=seed)
    return ForgetSpec("class", 0.0, target_class=int(forget_class), seed=seed)


def cell_stem(task, section, ratio, forget_class, method, seed):
    where = f"r{float(ratio):.2f}" if section == "sample" else f"c{forget_class}"
    return f"{task}_{section}_{where}_{method.replace('+', '_')}_s{seed}"


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def evaluate(model, partition, corpus, task, forget_class=None):
    labels = corpus.labels(task)
    att = evalkit.calibrate_mia(model, partition.retain_ids, partition.test_ids, corpus, task)
    row = {
        "acc_test": evalkit.subset_accuracy(model, partition.test_ids, corpus, task),
        "acc_forget": evalkit.subset_accuracy(model, partition.forget_ids, corpus, task),
        "acc_retain": evalkit.subset_accuracy(model, partition.retain_ids, corpus, task),
        "mia": evalkit.mia_score(att, model, partition.forget_ids, corpus, task),
        "acc_forget_test": float("nan"),
        "chance": 100.0 / corpus.num_classes(task),
    }
    if forget_class is not None:
        ids = partition.test_ids[labels[partition.test_ids] == forget_class]
        if len(ids):
            row["acc_forget_test"] = evalkit.subset_accuracy(model, ids, corpus, task)
    return row


def run_group(cfg, ctx, section, ratio, forget_class, seed, out_dir=None):
    """All methods on one partition. Returns (result rows, timing rows)."""
    key = {"task": ctx.task, "section": section, "ratio": ratio, "forget_class": forget_class, "seed": seed}
    names = method_names(cfg)
    rows, timings = [], []

    def failed(method, err):
        return {**key, "method": method, "status": "failed", "error": err.replace("\n", " ")[:200]}

    try:
        spec = forget_spec(section, ratio, forget_class, seed)
        part = select_forget(ctx.base, spec, ctx.corpus.labels(ctx.task))
    except Exception as exc:  # noqa: BLE001  (recorded as failed cells)
        return [failed(m, f"{type(exc).__name__}: {exc}") for m in ["original", *names]], []

    fclass = int(forget_class) if section == "class" else None
    rows.append({**key, "section": "original", "method": "original", "status": "ok", "epochs_run": 0,
                 "error": "", **evaluate(ctx.original, part, ctx.corpus, ctx.task, fclass)})
    if section != "sample":
        rows[-1]["section"] = "original-class"

    budget = cfg.time_budget_seconds or None
    ordered = ["retrain"] + [m for m in names if m != "retrain"]
    for name in ordered:
        try:
            base_method, superloss = (name.split("+")[0], True) if "+" in name else (name, None)
            ucfg = cfg.unlearn_config(base_method, seed, superloss=superloss)
            if budget is not None and base_method != "retrain":
                ucfg = replace(ucfg, time_budget_seconds=budget)
            res = run_unlearn(ctx.original, part, ctx.corpus, ucfg, cfg.train_settings())
            if name == "retrain" and budget is None:
                budget = res.wall_time_seconds
            if name not in names:
                continue
            rows.append({**key, "method": name, "status": "ok", "epochs_run": res.epochs_run, "error": "",
                         **evaluate(res.model, part, ctx.corpus, ctx.task, fclass)})
            timings.append({**key, "method": name, "wall_time": res.wall_time_seconds,
                            "budget": budget if name != "retrain" else res.wall_time_seconds,
                            "within_budget": int(name == "retrain" or res.wall_time_seconds <= budget),
                            "stopped_by_budget": int(res.stopped_by_budget)})
            if out_dir is not None:
                stem = cell_stem(ctx.task, section, ratio, forget_class, name, seed)
                (out_dir / "traces" / f"{stem}.tsv").write_text(res.trace_tsv())
                if cfg.save_checkpoints:
                    save_model(res.model, out_dir / "checkpoints" / f"{stem}.ckpt")
        except Exception as exc:  # noqa: BLE001  (crash isolation per cell)
            log.error("cell %s/%s/%s seed %s failed: %s", ctx.task, section, name, seed, exc)
            log.debug("%s", traceback.format_exc())
            if name in names:
                rows.append(failed(name, f"{type(exc).__name__}: {exc}"))
    return rows, timings


def _group_job(args):
    return run_group(*args)


def _sort_key(cfg, row):
    names = ["original", *method_names(cfg)]
    section = row["section"].split("-")[0]
    ratio = float(row["ratio"]) if row["ratio"] != "" else -1.0
    return (
        TASKS.index(row["task"]),
        SECTION_ORDER.index(section) if row["section"] != "original-class" else 0.5,
        names.index(row["method"]) if row["method"] in names else len(names),
        ratio,
        row["seed"],
    )


def run_bench(cfg, out_dir=None, contexts=None):
    """Run the sweep. Returns (rows, timings); writes outputs when ``out_dir`` is given."""
    if out_dir is not None:
        out_dir = Path(out_dir)
        for sub in ("checkpoints", "traces"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    corpus = _stage("generate", cfg, load_corpus, cfg)
    contexts = contexts or {t: prepare_task(cfg, t, corpus) for t in cfg.tasks}
    if out_dir is not None:
        for t, ctx in contexts.items():
            save_model(ctx.original, out_dir / "checkpoints" / f"original_{t}.ckpt")
    jobs = [
        (cfg, contexts[t], section, ratio, fclass, seed, out_dir)
        for t in cfg.tasks
        for section, ratio, fclass in groups_for(cfg)
        for seed in cfg.seeds
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_group_job, jobs))
    else:
        results = [_group_job(j) for j in jobs]
    rows = [r for rs, _ in results for r in rs]
    timings = [t for _, ts in results for t in ts]
    rows.sort(key=lambda r: _sort_key(cfg, r))
    timings.sort(key=lambda r: _sort_key(cfg, r))
    if out_dir is not None:
        write_outputs(cfg, rows, timings, out_dir)
    return rows, timings


def rows_to_csv(rows, columns=RESULT_FIELDS):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c, "")) for c in columns})
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_reports(rows, timings):
    """Per task: list of EvalReport rows ordered Original, sample methods, class methods."""
    wall = {(t["task"], t["section"], t["method"], str(t["ratio"]), str(t["seed"])): float(t["wall_time"])
            for t in timings}
    out = {}
    for task in TASKS:
        task_rows = [r for r in rows if r["task"] == task and r["status"] == "ok"]
        if not task_rows:
            continue
        has_sample = any(r["section"] == "original" for r in task_rows)
        agg = []
        for r in task_rows:
            section = r["section"]
            if section == "original-class":
                if has_sample:
                    continue
                section = "original"
            agg.append({
                "section": section,
                "method": r["method"],
                "seed": r["seed"],
                "acc_test": float(r["acc_test"]),
                "acc_forget": float(r["acc_forget"]),
                "acc_retain": float(r["acc_retain"]),
                "mia_score": float(r["mia"]),
                "wall_time": wall.get((task, r["section"], r["method"], str(r["ratio"]), str(r["seed"])), 0.0),
            })
        out[task] = evalkit.assemble_report(agg)
    return out


_TITLES = {
    "keyword": "Unlearning on the keyword-spotting analog",
    "speaker": "Unlearning on the speaker-identification analog",
}


def write_outputs(cfg, rows, timings, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "results.csv").write_text(rows_to_csv(rows))
    (out_dir / "timings.csv").write_text(rows_to_csv(timings, TIMING_FIELDS))
    write_reports(rows, timings, out_dir)


def write_reports(rows, timings, out_dir):
    out_dir = Path(out_dir)
    reports = build_reports(rows, timings)
    md = []
    for task, reps in reports.items():
        (out_dir / f"report_{task}.csv").write_text(evalkit.report_csv(reps))
        chance = next((float(r["chance"]) for r in rows if r["task"] == task and r.get("chance") not in (None, "")), None)
        md.append(evalkit.report_markdown(reps, _TITLES[task], chance))
    (out_dir / "report.md").write_text("\n".join(md))
    return reports
