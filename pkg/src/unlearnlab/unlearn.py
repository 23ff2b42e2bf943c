"""Training, the retrain-from-scratch oracle, and the unlearning methods.

Every method optimises ``L_f(D_f) + lambda * L_r(D_r)`` with plain SGD:

=============  =======================================  ===================================  ======
method         forgetting term L_f                      retaining term L_r                   lambda
=============  =======================================  ===================================  ======
grad_ascent    -CE on D_f                               none                                 0
rand_label     CE on D_f with corrupted labels          CE on D_r                            1
salun          as rand_label, saliency-masked updates   CE on D_r                            1
scrub          -CE on D_f (first half of epochs)        CE + embedding MSE to f on D_r       cfg
bad_t          KL(f'(D_f) || f_d(D_f))                  KL(f'(D_r) || f(D_r))                1
=============  =======================================  ===================================  ======

With ``superloss_enabled`` the per-sample forgetting losses are reweighted by
the SuperLoss confidence ``sigma(l_i)``; the retaining term is left alone.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .nnkit import (
    LOG_FLOOR,
    GradBundle,
    ParamMask,
    backward,
    cross_entropy,
    forward,
    init_model,
    kl_divergence,
    log_softmax,
    per_sample_cross_entropy,
    sgd_step,
    softmax,
)

log = logging.getLogger(__name__)

METHODS = ("grad_ascent", "rand_label", "salun", "scrub", "bad_t", "retrain")
FIXED_LAMBDA = {"grad_ascent": 0.0, "rand_label": 1.0, "salun": 1.0, "bad_t": 1.0}


@dataclass(frozen=True)
class TrainSettings:
    hidden_dims: tuple = (64, 32)
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 32
    activation: str = "relu"


# Per-method defaults, tuned on the default desk corpus.
METHOD_DEFAULTS = {
    "grad_ascent": {"lr": 0.2, "epochs": 10},
    "rand_label": {"lr": 0.05, "epochs": 5},
    "salun": {"lr": 0.05, "epochs": 5},
    "scrub": {"lr": 0.2, "epochs": 10},
    "bad_t": {"lr": 0.2, "epochs": 5},
    "retrain": {},  # uses the TrainSettings of the original model
}


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "grad_ascent"
    lam: float = 1.0
    lr: float = 0.2
    epochs: int = 10
    batch_size: int = 32
    gamma: float = 0.5
    superloss_enabled: bool = False
    sl_lambda: float = 1.0
    sl_ema: float = 0.9
    seed: int = 0
    time_budget_seconds: float = math.inf

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not self.sl_lambda > 0:
            raise ValueError("sl_lambda must be positive")
        if not 0.0 < self.sl_ema <= 1.0:
            raise ValueError("sl_ema must be in (0, 1]")
        if not self.time_budget_seconds > 0:
            raise ValueError("time_budget_seconds must be positive")

    @classmethod
    def for_method(cls, method, **overrides):
        """Config with the method's tuned lr/epochs, then ``overrides``."""
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
        return cls(method=method, **{**METHOD_DEFAULTS[method], **overrides})

    @property
    def effective_lambda(self):
        return FIXED_LAMBDA.get(self.method, self.lam)


@dataclass
class UnlearnResult:
    model: object
    epochs_run: int = 0
    wall_time_seconds: float = 0.0
    trace: list = field(default_factory=list)  # (loss_Df, loss_Dr) per epoch
    grad_samples: dict = field(default_factory=lambda: {"forget": 0, "retain": 0})
    extras: dict = field(default_factory=dict)
    warning: str | None = None
    stopped_by_budget: bool = False

    def trace_tsv(self):
        lines = ["epoch\tloss_Df\tloss_Dr"]
        lines += [f"{i + 1}\t{lf!r}\t{lr!r}" for i, (lf, lr) in enumerate(self.trace)]
        return "\n".join(lines) + "\n"


@dataclass
class Subsets:
    """Feature/label arrays for D_f and D_r."""

    Xf: np.ndarray
    yf: np.ndarray
    Xr: np.ndarray
    yr: np.ndarray

    @classmethod
    def from_partition(cls, corpus, partition):
        X = corpus.features()
        y = corpus.labels(partition.task)
        f, r = partition.forget_ids, partition.retain_ids
        return cls(X[f], y[f], X[r], y[r])


# ---------------------------------------------------------------- SuperLoss


def superloss_weight(loss, tau, sl_lambda):
    """Confidence ``sigma`` minimising ``(l - tau) * sigma + sl_lambda * log(sigma)^2``.

    ``sigma = exp(-W(max(beta, -1/e)))`` with ``beta = (l - tau) / (2 * sl_lambda)``.
    The clamp keeps W on its principal branch; weights saturate at ``e``.
    """
    return kernels.superloss_weight(loss, tau, sl_lambda)


class SuperLoss:
    """Per-sample weighting with an EMA loss threshold ``tau``."""

    def __init__(self, sl_lambda=0.25, sl_ema=0.9):
        if not sl_lambda > 0:
            raise ValueError("sl_lambda must be positive")
        self.sl_lambda = sl_lambda
        self.sl_ema = sl_ema
        self.tau = None

    def __call__(self, losses):
        losses = np.asarray(losses, dtype=np.float64)
        batch_mean = float(losses.mean())
        if self.tau is None:
            self.tau = batch_mean
        sigma = kernels.superloss_weights(losses, self.tau, self.sl_lambda)
        self.tau = self.sl_ema * self.tau + (1.0 - self.sl_ema) * batch_mean
        return sigma


def superloss_wrap(cfg):
    """Weighting callable for the forgetting term, or None when disabled."""
    if not cfg.superloss_enabled:
        return None
    return SuperLoss(cfg.sl_lambda, cfg.sl_ema)


# ---------------------------------------------------------------- helpers


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _add(a: GradBundle, b: GradBundle, scale=1.0):
    grads = [(wa + scale * wb, ba + scale * bb) for (wa, ba), (wb, bb) in zip(a.grads, b.grads)]
    return GradBundle(grads, a.loss + scale * b.loss)


def _scale(a: GradBundle, s):
    return GradBundle([(s * w, s * b) for w, b in a.grads], s * a.loss)


def _mean_ce(model, X, y):
    if len(y) == 0:
        return float("nan")
    return float(per_sample_cross_entropy(forward(model, X)[0], y).mean())


def _ce_grads(model, X, y, weigh=None, ascend=False):
    """CE gradient; ``weigh`` sees the per-sample forgetting loss (``-CE`` when ascending)."""
    logits = forward(model, X)[0]
    weights = None
    if weigh is not None:
        ce = per_sample_cross_entropy(logits, y)
        weights = weigh(-ce if ascend else ce)
    loss, dlogits = cross_entropy(logits, y, weights)
    return backward(model, X, dlogits, loss=loss)


def _kl_grads(model, X, target_logits, weigh=None):
    logits = forward(model, X)[0]
    weights = None
    if weigh is not None:
        weights = weigh(_per_sample_kl(logits, target_logits))
    loss, dlogits = kl_divergence(logits, target_logits, weights)
    return backward(model, X, dlogits, loss=loss)


def _per_sample_kl(p_logits, q_logits):
    logp = np.maximum(log_softmax(p_logits), np.log(LOG_FLOOR))
    logq = np.maximum(log_softmax(q_logits), np.log(LOG_FLOOR))
    return (softmax(p_logits) * (logp - logq)).sum(axis=1)


class _EpochClock:
    """Epoch-granular budget: skip an epoch that would overrun the budget."""

    def __init__(self, budget):
        self.budget = budget
        self.start = time.perf_counter()
        self.last = 0.0
        self.stopped = False

    def may_start(self):
        elapsed = time.perf_counter() - self.start
        if elapsed + self.last > self.budget:
            self.stopped = True
            return False
        self._t0 = time.perf_counter()
        return True

    def done(self):
        self.last = time.perf_counter() - self._t0

    def elapsed(self):
        return time.perf_counter() - self.start


def _finish(result, model, clock, data):
    result.model = model
    result.wall_time_seconds = clock.elapsed()
    result.stopped_by_budget = clock.stopped
    result.epochs_run = len(result.trace)
    return result


def _record(result, model, data):
    result.trace.append((_mean_ce(model, data.Xf, data.yf), _mean_ce(model, data.Xr, data.yr)))


# ---------------------------------------------------------------- training


def train(corpus, partition, settings=TrainSettings(), seed=0, ids=None):
    """Minibatch SGD on cross-entropy; returns the best held-out checkpoint.

    ``ids`` defaults to the partition's train ids. Held-out accuracy is measured
    on ``partition.test_ids``; later epochs win ties.
    """
    ids = partition.train_ids if ids is None else np.asarray(ids)
    if len(ids) == 0:
        raise ValueError("cannot train on an empty set")
    X, y = corpus.features(), corpus.labels(partition.task)
    Xtr, ytr = X[ids], y[ids]
    Xte, yte = X[partition.test_ids], y[partition.test_ids]
    model = init_model(X.shape[1], list(settings.hidden_dims), corpus.num_classes(partition.task), seed, settings.activation)
    rng = np.random.default_rng([seed, 7])
    best, best_acc = model, -1.0
    for _ in range(settings.epochs):
        for b in _batches(len(ids), settings.batch_size, rng):
            model = sgd_step(model, _ce_grads(model, Xtr[b], ytr[b]), settings.lr)
        acc = float((forward(model, Xte)[0].argmax(axis=1) == yte).mean()) if len(yte) else 0.0
        if acc >= best_acc:
            best, best_acc = model, acc
    return best


def retrain_oracle(corpus, partition, settings=TrainSettings(), seed=0):
    """Fresh model trained on D_r only; its wall time is the unlearning budget."""
    if len(partition.retain_ids) == 0:
        raise ValueError("retrain oracle needs a non-empty retain set")
    t0 = time.perf_counter()
    model = train(corpus, partition, settings, seed, ids=partition.retain_ids)
    wall = time.perf_counter() - t0
    return UnlearnResult(model, epochs_run=settings.epochs, wall_time_seconds=wall,
                         grad_samples={"forget": 0, "retain": len(partition.retain_ids) * settings.epochs})


# ---------------------------------------------------------------- methods


def grad_ascent(f, data: Subsets, cfg: UnlearnConfig, *, _clock=None, _result=None, _epochs=None):
    """Ascend cross-entropy on D_f only (lambda = 0)."""
    clock = _clock or _EpochClock(cfg.time_budget_seconds)
    result = _result or UnlearnResult(f)
    if len(data.yf) == 0:
        result.warning = "empty forget set"
        return _finish(result, f, clock, data)
    weigh = superloss_wrap(cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    model = f
    for _ in range(cfg.epochs if _epochs is None else _epochs):
        if not clock.may_start():
            break
        for b in _batches(len(data.yf), cfg.batch_size, rng):
            g = _ce_grads(model, data.Xf[b], data.yf[b], weigh, ascend=True)
            result.grad_samples["forget"] += len(b)
            model = sgd_step(model, g, cfg.lr, direction="ascend")
        clock.done()
        _record(result, model, data)
    return _finish(result, model, clock, data)


def corrupt_labels(labels, num_classes, seed):
    """Replace each label by a uniformly drawn *different* class."""
    if num_classes < 2:
        raise ValueError("random labelling needs at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([seed, 1])
    shift = rng.integers(1, num_classes, size=len(labels))
    return (labels + shift) % num_classes


def _joint_descent(f, data, cfg, forget_grads, retain_grads, mask=None, monitor=None):
    """Shared loop over shuffled minibatches of D_f union D_r.

    A batch ``B`` contributes ``(n_f * L_f + lambda * n_r * L_r) / |B|`` where
    ``L_f`` and ``L_r`` are means over its ``n_f`` forget and ``n_r`` retain
    samples, i.e. both terms are per-sample sums normalised by the batch size.
    """
    clock = _EpochClock(cfg.time_budget_seconds)
    result = UnlearnResult(f)
    lam = cfg.effective_lambda
    nf, nr = len(data.yf), len(data.yr)
    rng = np.random.default_rng([cfg.seed, 0])
    model = f
    if monitor is not None:
        result.extras["monitor"] = [monitor(model)]
    for _ in range(cfg.epochs):
        if not clock.may_start():
            break
        for b in _batches(nf + nr, cfg.batch_size, rng):
            bf, br = b[b < nf], b[b >= nf] - nf
            g = None
            if len(bf):
                g = _scale(forget_grads(model, bf), len(bf) / len(b))
                result.grad_samples["forget"] += len(bf)
            if len(br) and lam > 0:
                gr = retain_grads(model, br)
                result.grad_samples["retain"] += len(br)
                w = lam * len(br) / len(b)
                g = _scale(gr, w) if g is None else _add(g, gr, w)
            if g is not None:
                model = sgd_step(model, g, cfg.lr, mask=mask)
        clock.done()
        _record(result, model, data)
        if monitor is not None:
            result.extras["monitor"].append(monitor(model))
    return _finish(result, model, clock, data)


def rand_label(f, data: Subsets, cfg: UnlearnConfig, mask=None):
    """Fine-tune on D_f with corrupted labels plus D_r with true labels (lambda = 1)."""
    if len(data.yf) == 0:
        return UnlearnResult(f, warning="empty forget set")
    yc = corrupt_labels(data.yf, f.num_classes, cfg.seed)
    weigh = superloss_wrap(cfg)
    return _joint_descent(
        f, data, cfg,
        lambda m, b: _ce_grads(m, data.Xf[b], yc[b], weigh),
        lambda m, b: _ce_grads(m, data.Xr[b], data.yr[b]),
        mask=mask,
    )


def compute_saliency_mask(f, Xf, yf, gamma):
    """Top ``ceil(gamma * P)`` parameters by ``|d(-CE(D_f))/d theta|`` at ``f``.

    Ties are broken by ascending flat parameter index.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if len(yf) == 0:
        raise ValueError("saliency needs a non-empty forget set")
    g = _ce_grads(f, Xf, yf)
    score = np.abs(g.flat())
    k = math.ceil(gamma * score.size)
    chosen = np.zeros(score.size, dtype=bool)
    chosen[np.argsort(-score, kind="stable")[:k]] = True
    masks, off = [], 0
    for w, b in f.layers:
        mw = chosen[off : off + w.size].reshape(w.shape)
        off += w.size
        mb = chosen[off : off + b.size]
        off += b.size
        masks.append((mw, mb))
    return ParamMask(masks)


def salun(f, data: Subsets, cfg: UnlearnConfig):
    """Random labelling restricted to the salient parameters (mask fixed at ``f``)."""
    if len(data.yf) == 0:
        return UnlearnResult(f, warning="empty forget set")
    t0 = time.perf_counter()
    mask = compute_saliency_mask(f, data.Xf, data.yf, cfg.gamma)
    budget = cfg.time_budget_seconds - (time.perf_counter() - t0)
    result = rand_label(f, data, replace(cfg, time_budget_seconds=max(budget, 1e-9)), mask=mask)
    result.wall_time_seconds = time.perf_counter() - t0
    result.extras["mask_selected"] = mask.selected_count
    return result


def embedding_distance(model, reference, X):
    """Mean squared difference between penultimate activations (over rows and units)."""
    e1 = forward(model, X)[1]
    e0 = forward(reference, X)[1]
    return float(((e1 - e0) ** 2).mean())


def _scrub_repair_grads(model, frozen, X, y, lam):
    logits, emb = forward(model, X)
    ref = forward(frozen, X)[1]
    n = len(y)
    loss, dlogits = cross_entropy(logits, y)
    diff = emb - ref
    dist = float((diff**2).mean())
    return backward(model, X, dlogits, dembed=lam * 2.0 * diff / diff.size, loss=loss + lam * dist)


def scrub(f, data: Subsets, cfg: UnlearnConfig):
    """Ascent on D_f for ``ceil(E/2)`` epochs, then repair on D_r for ``floor(E/2)``.

    Repair loss: ``CE(D_r) + lambda * mean((emb_f'(x) - emb_f(x))^2)`` over the batch.
    """
    if len(data.yf) == 0 or len(data.yr) == 0:
        return UnlearnResult(f, warning="empty forget or retain set")
    clock = _EpochClock(cfg.time_budget_seconds)
    result = UnlearnResult(f)
    ascent_epochs = math.ceil(cfg.epochs / 2)
    repair_epochs = cfg.epochs // 2
    grad_ascent(f, data, cfg, _clock=clock, _result=result, _epochs=ascent_epochs)
    model = result.model
    dists = [embedding_distance(model, f, data.Xr)]
    rng = np.random.default_rng([cfg.seed, 2])
    for _ in range(repair_epochs):
        if clock.stopped or not clock.may_start():
            break
        for b in _batches(len(data.yr), cfg.batch_size, rng):
            g = _scrub_repair_grads(model, f, data.Xr[b], data.yr[b], cfg.lam)
            result.grad_samples["retain"] += len(b)
            model = sgd_step(model, g, cfg.lr)
        clock.done()
        _record(result, model, data)
        dists.append(embedding_distance(model, f, data.Xr))
    result.extras["phase"] = ["ascent"] * min(ascent_epochs, len(result.trace))
    result.extras["phase"] += ["repair"] * (len(result.trace) - len(result.extras["phase"]))
    result.extras["embedding_distance"] = dists
    return _finish(result, model, clock, data)


def bad_t_loss(student, teacher, incompetent, Xf, Xr, lam=1.0):
    """``(KL(student || incompetent) on D_f, KL(student || teacher) on D_r)``."""
    lf = kl_divergence(forward(student, Xf)[0], forward(incompetent, Xf)[0])[0] if len(Xf) else 0.0
    lr = kl_divergence(forward(student, Xr)[0], forward(teacher, Xr)[0])[0] if len(Xr) else 0.0
    return lf, lam * lr


def incompetent_teacher(f, seed):
    return init_model(f.input_dim, f.hidden_dims, f.num_classes, seed + 104729, f.activation)


def bad_t(f, data: Subsets, cfg: UnlearnConfig, start=None):
    """Distil toward a random teacher on D_f and the original model on D_r (lambda = 1).

    ``start`` overrides the initial student (defaults to ``f``). The total
    objective after each epoch lands in ``result.extras["total_loss"]``.
    """
    if len(data.yf) == 0 or len(data.yr) == 0:
        return UnlearnResult(f, warning="empty forget or retain set")
    t0 = time.perf_counter()
    fd = incompetent_teacher(f, cfg.seed)
    tf = forward(fd, data.Xf)[0]
    tr = forward(f, data.Xr)[0]
    weigh = superloss_wrap(cfg)
    budget = max(cfg.time_budget_seconds - (time.perf_counter() - t0), 1e-9)
    result = _joint_descent(
        f if start is None else start,
        data,
        replace(cfg, time_budget_seconds=budget),
        lambda m, b: _kl_grads(m, data.Xf[b], tf[b], weigh),
        lambda m, b: _kl_grads(m, data.Xr[b], tr[b]),
        monitor=lambda m: sum(bad_t_loss(m, f, fd, data.Xf, data.Xr)),
    )
    result.wall_time_seconds = time.perf_counter() - t0
    result.extras["total_loss"] = result.extras.pop("monitor")
    return result


_DISPATCH = {
    "grad_ascent": grad_ascent,
    "rand_label": rand_label,
    "salun": salun,
    "scrub": scrub,
    "bad_t": bad_t,
}


def run_unlearn(f, partition, corpus, cfg: UnlearnConfig, settings=TrainSettings()):
    """Single entry point. An empty forget set is a no-op for every method."""
    cfg.validate()
    if len(partition.forget_ids) == 0:
        return UnlearnResult(f, warning="empty forget set")
    if cfg.epochs == 0:
        return UnlearnResult(f)
    if cfg.method == "retrain":
        return retrain_oracle(corpus, partition, settings, cfg.seed)
    data = Subsets.from_partition(corpus, partition)
    result = _DISPATCH[cfg.method](f, data, cfg)
    log.debug("%s: %d epochs in %.3fs", cfg.method, result.epochs_run, result.wall_time_seconds)
    return result
