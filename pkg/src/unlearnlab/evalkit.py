"""Subset accuracy, a loss-threshold membership-inference attack, and table assembly."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .nnkit import forward, per_sample_cross_entropy

log = logging.getLogger(__name__)

COLUMNS = ("Method", "D_t", "D_f", "D_r", "MIA", "Time")


def _xy(corpus, ids, label_kind):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty id set")
    return corpus.features()[ids], corpus.labels(label_kind)[ids]


def subset_accuracy(model, ids, corpus, label_kind):
    """Percentage of ``ids`` whose argmax prediction matches the label."""
    X, y = _xy(corpus, ids, label_kind)
    pred = forward(model, X)[0].argmax(axis=1)
    return 100.0 * float((pred == y).sum()) / len(y)


def sample_losses(model, ids, corpus, label_kind):
    X, y = _xy(corpus, ids, label_kind)
    return per_sample_cross_entropy(forward(model, X)[0], y)


@dataclass
class MiaAttacker:
    """Predicts "member" when a sample's loss is below ``threshold``."""

    threshold: float
    balanced_accuracy: float
    member_mean: float
    nonmember_mean: float
    orientation: str = "low_loss_is_member"

    def is_member(self, losses):
        return np.asarray(losses) < self.threshold


def fit_threshold(member_losses, nonmember_losses):
    """Loss threshold maximising balanced accuracy.

    The threshold sits at the midpoint of the optimal gap between adjacent
    sorted losses; if several gaps tie, the lowest one wins. Cuts below the
    smallest or above the largest loss sit one unit outside the data.
    """
    m = np.asarray(member_losses, dtype=np.float64)
    u = np.asarray(nonmember_losses, dtype=np.float64)
    if m.size == 0 or u.size == 0:
        raise ValueError("MIA calibration needs non-empty member and non-member sets")
    lo, hi, bal = kernels.threshold_sweep(m, u)
    if np.isinf(lo):
        thr = hi - 1.0
    elif np.isinf(hi):
        thr = lo + 1.0
    else:
        thr = 0.5 * (lo + hi)
    return MiaAttacker(float(thr), float(bal), float(m.mean()), float(u.mean()))


def calibrate_mia(model, member_ids, nonmember_ids, corpus, label_kind):
    """Fit the attacker on ``model``'s losses: members from D_r, non-members from D_t."""
    if len(np.intersect1d(member_ids, nonmember_ids)):
        raise ValueError("member and non-member calibration sets overlap")
    return fit_threshold(
        sample_losses(model, member_ids, corpus, label_kind),
        sample_losses(model, nonmember_ids, corpus, label_kind),
    )


def mia_score(attacker, model, forget_ids, corpus, label_kind):
    """Percentage of D_f the attacker labels non-member (higher means better forgetting)."""
    losses = sample_losses(model, forget_ids, corpus, label_kind)
    return 100.0 * float((~attacker.is_member(losses)).sum()) / len(losses)


@dataclass
class EvalReport:
    method: str
    acc_test: float
    acc_forget: float
    acc_retain: float
    mia_score: float
    wall_time: float
    seeds_used: int
    per_seed: dict = field(default_factory=dict)
    section: str = ""
    extra: dict = field(default_factory=dict)


_METRICS = ("acc_test", "acc_forget", "acc_retain", "mia_score", "wall_time")
_SECTION_ORDER = {"original": 0, "sample": 1, "class": 2}


def assemble_report(rows):
    """Collapse per-seed rows into one EvalReport per (section, method).

    ``rows`` are dicts with ``section`` ("original", "sample" or "class"),
    ``method``, ``seed`` and the five metric keys; other numeric keys are
    averaged into ``extra``. Output order: Original, sample rows, class rows,
    methods in first-seen order within a section.
    """
    if not rows:
        return []
    groups = {}
    for r in rows:
        groups.setdefault((r["section"], r["method"]), []).append(r)
    # Original pools every partition of a section, so it is exempt
    counts = {len(v) for k, v in groups.items() if k[0] != "original"}
    if len(counts) > 1:
        log.warning("inconsistent seed counts across methods: %s", sorted(counts))
    keys = sorted(groups, key=lambda k: _SECTION_ORDER.get(k[0], 3))
    out = []
    for section, method in keys:
        group = groups[(section, method)]
        per_seed = {m: [float(r[m]) for r in group] for m in _METRICS}
        means = {m: float(np.mean(v)) for m, v in per_seed.items()}
        extra_keys = [k for k in group[0] if k not in _METRICS and k not in ("section", "method", "seed")]
        extra = {}
        for k in extra_keys:
            vals = [r.get(k) for r in group]
            if all(isinstance(v, (int, float)) and v is not None for v in vals):
                extra[k] = float(np.mean(vals))
        out.append(EvalReport(method, means["acc_test"], means["acc_forget"], means["acc_retain"],
                              means["mia_score"], means["wall_time"], len(group), per_seed, section, extra))
    return out


def _label(rep):
    if rep.section == "original":
        return "Original"
    return f"{rep.method} ({rep.section})"


def report_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in reports:
        time_cell = "NA" if r.section == "original" else f"{r.wall_time:.4f}"
        w.writerow([_label(r), f"{r.acc_test:.2f}", f"{r.acc_forget:.2f}", f"{r.acc_retain:.2f}",
                    f"{r.mia_score:.2f}", time_cell])
    return buf.getvalue()


def report_markdown(reports, title="", chance=None):
    """Aligned markdown table with the Method/D_t/D_f/D_r/MIA/Time columns; Time in seconds."""
    cells = [list(COLUMNS)]
    for r in reports:
        time_cell = "NA" if r.section == "original" else f"{r.wall_time:.3f}"
        cells.append([_label(r), f"{r.acc_test:.1f}", f"{r.acc_forget:.1f}", f"{r.acc_retain:.1f}",
                      f"{r.mia_score:.1f}", time_cell])
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    fmt = lambda row: "| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |"
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines += ["Accuracies and MIA in percent; Time in seconds.", ""]
    lines.append(fmt(cells[0]))
    lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    lines += [fmt(row) for row in cells[1:]]
    if chance is not None:
        lines += ["", f"Chance level for D_f: {chance:.2f}%"]
    return "\n".join(lines) + "\n"
